//! Pseudo-spectral vorticity–streamfunction solver for 2D incompressible flow
//! with a passive tracer on the periodic unit square.
//!
//! Advection is evaluated in physical space with 2/3-rule dealiasing; viscous
//! and tracer diffusion are integrated exactly by an integrating factor, and
//! the remaining terms by classical RK4.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use num_traits::Zero;

use super::spectral::Spectral;
use super::{check_grid, InitialCondition, PhysicsParams, SimulationTrajectory, System, BLOW_UP_LIMIT};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Half-width of the tanh shear layers.
const LAYER_WIDTH: f64 = 0.05;
/// Peak transverse velocity of the seeded perturbation.
const PERTURBATION: f64 = 0.05;
/// Width of the Gaussian envelope localising the perturbation near each layer.
const ENVELOPE: f64 = 0.1;

type Spec<T> = Vec<Complex<T>>;

struct ShearSolver<T: Scalar> {
    sp: Spectral<T>,
    /// Integrating factors `exp(-ν k² dt/2)` and `exp(-κ k² dt/2)`.
    e_w: Vec<T>,
    e_c: Vec<T>,
    forcing: Option<Spec<T>>,
    dt: T,
}

impl<T: Scalar> ShearSolver<T> {
    fn new(params: &PhysicsParams, h: usize, w: usize) -> Self {
        let mut sp = Spectral::<T>::new(h, w);
        let dt = T::lit(params.dt);
        let half = dt / T::lit(2.0);
        let nu = T::lit(params.viscosity);
        let kappa = T::lit(params.tracer_diffusivity);
        let e_w = sp.k2.iter().map(|&k2| (-nu * k2 * half).exp()).collect();
        let e_c = sp.k2.iter().map(|&k2| (-kappa * k2 * half).exp()).collect();
        let forcing = (params.forcing != 0.0).then(|| {
            // f = (F sin 4πy, 0)  →  curl f = -∂f_x/∂y = -4πF cos 4πy
            let four_pi = T::lit(4.0 * std::f64::consts::PI);
            let amp = T::lit(params.forcing);
            let curl = Array2::from_shape_fn((h, w), |(j, _)| {
                let y = T::from_usize_lossy(j) / T::from_usize_lossy(h);
                -four_pi * amp * (four_pi * y).cos()
            });
            sp.forward(&curl)
        });
        Self {
            sp,
            e_w,
            e_c,
            forcing,
            dt,
        }
    }

    /// Velocity from vorticity: `ψ̂ = ω̂/k²`, `u = ∂ψ/∂y`, `v = -∂ψ/∂x`.
    fn velocity_spec(&self, w_hat: &[Complex<T>]) -> (Spec<T>, Spec<T>) {
        let psi: Spec<T> = w_hat
            .iter()
            .zip(&self.sp.k2)
            .map(|(c, &k2)| if k2 > T::zero() { c / k2 } else { Complex::zero() })
            .collect();
        let u = self.sp.ddy(&psi);
        let v = self.sp.ddx(&psi).into_iter().map(|c| -c).collect();
        (u, v)
    }

    /// Advection (and forcing) tendencies for vorticity and tracer.
    fn nonlinear(&mut self, w_hat: &[Complex<T>], c_hat: &[Complex<T>]) -> (Spec<T>, Spec<T>) {
        let (u_hat, v_hat) = self.velocity_spec(w_hat);
        let u = self.sp.inverse_real(&u_hat);
        let v = self.sp.inverse_real(&v_hat);
        let wx = self.sp.inverse_real(&self.sp.ddx(w_hat));
        let wy = self.sp.inverse_real(&self.sp.ddy(w_hat));
        let cx = self.sp.inverse_real(&self.sp.ddx(c_hat));
        let cy = self.sp.inverse_real(&self.sp.ddy(c_hat));

        let mut nw: Spec<T> = Vec::with_capacity(u.len());
        let mut nc: Spec<T> = Vec::with_capacity(u.len());
        for i in 0..u.len() {
            let (uu, vv) = (u.as_slice().unwrap()[i], v.as_slice().unwrap()[i]);
            let aw = -(uu * wx.as_slice().unwrap()[i] + vv * wy.as_slice().unwrap()[i]);
            let ac = -(uu * cx.as_slice().unwrap()[i] + vv * cy.as_slice().unwrap()[i]);
            nw.push(Complex::new(aw, T::zero()));
            nc.push(Complex::new(ac, T::zero()));
        }
        self.sp.forward_in_place(&mut nw);
        self.sp.forward_in_place(&mut nc);
        for (i, keep) in self.sp.dealias.iter().enumerate() {
            if !keep {
                nw[i] = Complex::zero();
                nc[i] = Complex::zero();
            }
        }
        if let Some(f) = &self.forcing {
            for (n, f) in nw.iter_mut().zip(f) {
                *n += f;
            }
        }
        (nw, nc)
    }

    /// One integrating-factor RK4 step for both transported quantities.
    fn step(&mut self, w_hat: &mut Spec<T>, c_hat: &mut Spec<T>) {
        let dt = self.dt;
        let half = dt / T::lit(2.0);
        let sixth = dt / T::lit(6.0);
        let two = T::lit(2.0);
        let n = w_hat.len();

        let (k1w, k1c) = self.nonlinear(w_hat, c_hat);
        let mut w2 = vec![Complex::zero(); n];
        let mut c2 = vec![Complex::zero(); n];
        for i in 0..n {
            w2[i] = (w_hat[i] + k1w[i] * half) * self.e_w[i];
            c2[i] = (c_hat[i] + k1c[i] * half) * self.e_c[i];
        }
        let (k2w, k2c) = self.nonlinear(&w2, &c2);
        let mut w3 = vec![Complex::zero(); n];
        let mut c3 = vec![Complex::zero(); n];
        for i in 0..n {
            w3[i] = w_hat[i] * self.e_w[i] + k2w[i] * half;
            c3[i] = c_hat[i] * self.e_c[i] + k2c[i] * half;
        }
        let (k3w, k3c) = self.nonlinear(&w3, &c3);
        let mut w4 = vec![Complex::zero(); n];
        let mut c4 = vec![Complex::zero(); n];
        for i in 0..n {
            let (ew, ec) = (self.e_w[i], self.e_c[i]);
            w4[i] = w_hat[i] * ew * ew + k3w[i] * (dt * ew);
            c4[i] = c_hat[i] * ec * ec + k3c[i] * (dt * ec);
        }
        let (k4w, k4c) = self.nonlinear(&w4, &c4);
        for i in 0..n {
            let (ew, ec) = (self.e_w[i], self.e_c[i]);
            w_hat[i] = w_hat[i] * ew * ew
                + (k1w[i] * (ew * ew) + (k2w[i] + k3w[i]) * (two * ew) + k4w[i]) * sixth;
            c_hat[i] = c_hat[i] * ec * ec
                + (k1c[i] * (ec * ec) + (k2c[i] + k3c[i]) * (two * ec) + k4c[i]) * sixth;
        }
    }

    /// `[tracer, pressure, velocity_x, velocity_y]` in physical space.
    fn observe(&mut self, w_hat: &[Complex<T>], c_hat: &[Complex<T>]) -> [Array2<T>; 4] {
        let (u_hat, v_hat) = self.velocity_spec(w_hat);
        let u = self.sp.inverse_real(&u_hat);
        let v = self.sp.inverse_real(&v_hat);
        let ux = self.sp.inverse_real(&self.sp.ddx(&u_hat));
        let uy = self.sp.inverse_real(&self.sp.ddy(&u_hat));
        let vx = self.sp.inverse_real(&self.sp.ddx(&v_hat));
        let vy = self.sp.inverse_real(&self.sp.ddy(&v_hat));
        // ∇²p = 2 (u_x v_y − u_y v_x)
        let two = T::lit(2.0);
        let mut src = Array2::zeros((self.sp.h, self.sp.w));
        ndarray::Zip::from(&mut src)
            .and(&ux)
            .and(&uy)
            .and(&vx)
            .and(&vy)
            .for_each(|s, &a, &b, &c, &d| *s = two * (a * d - b * c));
        let src_hat = self.sp.forward(&src);
        let p_hat: Spec<T> = src_hat
            .iter()
            .zip(&self.sp.k2)
            .map(|(s, &k2)| if k2 > T::zero() { -s / k2 } else { Complex::zero() })
            .collect();
        let p = self.sp.inverse_real(&p_hat);
        let c = self.sp.inverse_real(c_hat);
        [c, p, u, v]
    }
}

fn initial_state<T: Scalar>(
    params: &PhysicsParams,
    sp: &mut Spectral<T>,
    seed: u64,
) -> (Spec<T>, Spec<T>) {
    let (h, w) = (sp.h, sp.w);
    let two_pi = 2.0 * std::f64::consts::PI;
    let coord = |j: usize, n: usize| j as f64 / n as f64;
    let layer = |y: f64| ((y - 0.25) / LAYER_WIDTH).tanh() - ((y - 0.75) / LAYER_WIDTH).tanh();
    let gauss = |d: f64| (-(d * d) / (ENVELOPE * ENVELOPE)).exp();

    let mut u = Array2::<f64>::zeros((h, w));
    let mut v = Array2::<f64>::zeros((h, w));
    let mut c = Array2::<f64>::zeros((h, w));

    let perturbed = matches!(
        params.initial,
        InitialCondition::DoubleShearLayer | InitialCondition::Quiescent
    );
    if perturbed {
        // Two seeded modes with wavenumbers in {1, 2, 3} and random phases.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes: Vec<(f64, f64, f64)> = (0..2)
            .map(|_| {
                let m = rng.random_range(1..=3) as f64;
                let phase = rng.random_range(0.0..two_pi);
                let weight = rng.random_range(0.5..1.0);
                (m, phase, weight)
            })
            .collect();
        let total: f64 = modes.iter().map(|m| m.2).sum();
        for j in 0..h {
            let y = coord(j, h);
            let env = gauss(y - 0.25) + gauss(y - 0.75);
            c.row_mut(j).fill(0.5 * layer(y));
            if params.initial == InitialCondition::DoubleShearLayer {
                u.row_mut(j).fill(layer(y) - 1.0);
            }
            for i in 0..w {
                let x = coord(i, w);
                let s: f64 = modes
                    .iter()
                    .map(|&(m, ph, wt)| wt * (two_pi * m * x + ph).sin())
                    .sum();
                v[[j, i]] = PERTURBATION * env * s / total;
            }
        }
    } else if params.initial == InitialCondition::TaylorGreen {
        for j in 0..h {
            for i in 0..w {
                let (x, y) = (two_pi * coord(i, w), two_pi * coord(j, h));
                u[[j, i]] = x.sin() * y.cos();
                v[[j, i]] = -x.cos() * y.sin();
            }
        }
    } else {
        c.fill(0.5);
    }

    let u_hat = sp.forward(&u.mapv(T::lit));
    let v_hat = sp.forward(&v.mapv(T::lit));
    let w_hat: Spec<T> = sp
        .ddx(&v_hat)
        .into_iter()
        .zip(sp.ddy(&u_hat))
        .map(|(a, b)| a - b)
        .collect();
    let c_hat = sp.forward(&c.mapv(T::lit));
    (w_hat, c_hat)
}

fn check_finite<T: Scalar>(fields: &[Array2<T>], step: usize) -> Result<()> {
    let limit = T::lit(BLOW_UP_LIMIT);
    for f in fields {
        if let Some(v) = f.iter().find(|v| !v.is_finite() || v.abs() > limit) {
            return Err(Error::SolverBlowUp {
                step,
                detail: format!("field value {v} exceeds {BLOW_UP_LIMIT:e}"),
            });
        }
    }
    Ok(())
}

/// Integrates the shear-flow system and records `frames` snapshots, the first
/// being the initial condition.
pub fn simulate_shear_flow<T: Scalar>(
    params: &PhysicsParams,
    grid: (usize, usize),
    frames: usize,
    seed: u64,
) -> Result<SimulationTrajectory<T>> {
    let (h, w) = grid;
    check_grid(h, w, true)?;
    if params.system != System::ShearFlow {
        return Err(Error::InvalidParams("expected a ShearFlow system".into()));
    }
    params.validate()?;
    if frames == 0 {
        return Err(Error::EmptyResult { frames });
    }

    let mut solver = ShearSolver::<T>::new(params, h, w);
    let (mut w_hat, mut c_hat) = initial_state(params, &mut solver.sp, seed);
    let names = System::ShearFlow.field_names();
    let mut out: Vec<Array3<T>> = (0..names.len()).map(|_| Array3::zeros((frames, h, w))).collect();

    let mut step = 0;
    for frame in 0..frames {
        if frame > 0 {
            for _ in 0..params.save_stride {
                solver.step(&mut w_hat, &mut c_hat);
                step += 1;
            }
        }
        let obs = solver.observe(&w_hat, &c_hat);
        check_finite(&obs, step)?;
        for (dst, src) in out.iter_mut().zip(obs.iter()) {
            dst.index_axis_mut(Axis(0), frame).assign(src);
        }
    }

    SimulationTrajectory::new(
        names.iter().map(|n| n.to_string()).zip(out).collect(),
        params.clone(),
        seed,
        1,
    )
}

/// Mean kinetic energy `½⟨u² + v²⟩` of one frame.
pub fn kinetic_energy<T: Scalar>(vx: &ndarray::ArrayView2<T>, vy: &ndarray::ArrayView2<T>) -> T {
    let n = T::from_usize_lossy(vx.len());
    let sum: T = vx.iter().zip(vy.iter()).map(|(&a, &b)| a * a + b * b).sum();
    sum / (n + n)
}

/// Max pointwise `|∂u/∂x + ∂v/∂y|`, differentiated spectrally on the unit square.
pub fn spectral_divergence<T: Scalar>(
    vx: &ndarray::ArrayView2<T>,
    vy: &ndarray::ArrayView2<T>,
) -> T {
    let (h, w) = vx.dim();
    let mut sp = Spectral::<T>::new(h, w);
    let u_hat = sp.forward(&vx.to_owned());
    let v_hat = sp.forward(&vy.to_owned());
    let div: Spec<T> = sp
        .ddx(&u_hat)
        .into_iter()
        .zip(sp.ddy(&v_hat))
        .map(|(a, b)| a + b)
        .collect();
    sp.inverse_real(&div)
        .iter()
        .fold(T::zero(), |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_energy(t: &SimulationTrajectory<f64>, k: usize) -> f64 {
        let vx = t.field("velocity_x").unwrap();
        let vy = t.field("velocity_y").unwrap();
        kinetic_energy(&vx.index_axis(Axis(0), k), &vy.index_axis(Axis(0), k))
    }

    #[test]
    fn still_fluid_is_a_fixed_point() {
        let p = PhysicsParams::shear_flow(0.01, 0.01).with_initial(InitialCondition::Still);
        let t = simulate_shear_flow::<f64>(&p, (16, 16), 5, 3).unwrap();
        let f0 = t.frame(0);
        for k in 1..5 {
            assert_eq!(t.frame(k), f0);
        }
    }

    #[test]
    fn taylor_green_energy_decay_matches_analytic() {
        // On the unit square the mode has |k|² = 2(2π)², so the energy decays
        // as exp(-2ν|k|²t); in 2π-periodic units that is exp(-4νt).
        let nu = 0.01;
        let p = PhysicsParams::shear_flow(nu, nu)
            .with_initial(InitialCondition::TaylorGreen)
            .with_timing(0.01, 10);
        let t = simulate_shear_flow::<f64>(&p, (32, 32), 11, 0).unwrap();
        let e0 = frame_energy(&t, 0);
        let k2 = 2.0 * (2.0 * std::f64::consts::PI).powi(2);
        for k in 0..11 {
            let time = k as f64 * 0.1;
            let expected = e0 * (-2.0 * nu * k2 * time).exp();
            let got = frame_energy(&t, k);
            assert!((got - expected).abs() / expected < 0.01, "frame {k}: {got} vs {expected}");
        }
    }

    #[test]
    fn shear_layer_is_divergence_free_and_dissipative() {
        let p = PhysicsParams::shear_flow(2e-3, 1e-3);
        let t = simulate_shear_flow::<f64>(&p, (32, 32), 8, 7).unwrap();
        let vx = t.field("velocity_x").unwrap();
        let vy = t.field("velocity_y").unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..t.frames() {
            let (a, b) = (vx.index_axis(Axis(0), k), vy.index_axis(Axis(0), k));
            assert!(spectral_divergence(&a, &b) <= 1e-4);
            let e = kinetic_energy(&a, &b);
            assert!(e <= prev + 1e-6, "energy grew at frame {k}");
            prev = e;
        }
    }

    #[test]
    fn non_power_of_two_grid_rejected() {
        let p = PhysicsParams::shear_flow(0.01, 0.01);
        assert!(matches!(
            simulate_shear_flow::<f64>(&p, (48, 64), 4, 0),
            Err(Error::InvalidGrid { .. })
        ));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let p = PhysicsParams::shear_flow(5e-3, 5e-3);
        let a = simulate_shear_flow::<f32>(&p, (16, 16), 4, 11).unwrap();
        let b = simulate_shear_flow::<f32>(&p, (16, 16), 4, 11).unwrap();
        let c = simulate_shear_flow::<f32>(&p, (16, 16), 4, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn huge_viscosity_step_does_not_blow_up() {
        // Integrating factor keeps stiff diffusion stable.
        let p = PhysicsParams::shear_flow(0.5, 0.5).with_timing(0.05, 4);
        let t = simulate_shear_flow::<f64>(&p, (16, 16), 4, 1).unwrap();
        assert!(t.is_finite());
    }
}
