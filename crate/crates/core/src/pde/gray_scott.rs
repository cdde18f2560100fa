//! Explicit finite-difference Gray-Scott reaction-diffusion on a periodic grid
//! (unit grid spacing, five-point Laplacian).

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_grid, InitialCondition, PhysicsParams, SimulationTrajectory, System};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Concentrations are expected to stay inside `[0, UPPER_BOUND]`.
const UPPER_BOUND: f64 = 1.5;
const SQUARE_SIDE: usize = 6;
const SQUARES: usize = 3;

fn laplacian<T: Scalar>(f: &Array2<T>, out: &mut Array2<T>) {
    let (h, w) = f.dim();
    let four = T::lit(4.0);
    for j in 0..h {
        let (jn, js) = ((j + h - 1) % h, (j + 1) % h);
        for i in 0..w {
            let (iw, ie) = ((i + w - 1) % w, (i + 1) % w);
            out[[j, i]] = f[[jn, i]] + f[[js, i]] + f[[j, iw]] + f[[j, ie]] - four * f[[j, i]];
        }
    }
}

fn seed_squares<T: Scalar>(a: &mut Array2<T>, b: &mut Array2<T>, seed: u64) {
    let (h, w) = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SQUARES {
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        for dy in 0..SQUARE_SIDE.min(h) {
            for dx in 0..SQUARE_SIDE.min(w) {
                let (y, x) = ((y0 + dy) % h, (x0 + dx) % w);
                a[[y, x]] = T::lit(0.5);
                b[[y, x]] = T::lit(0.25);
            }
        }
    }
}

pub fn simulate_gray_scott<T: Scalar>(
    params: &PhysicsParams,
    grid: (usize, usize),
    frames: usize,
    seed: u64,
) -> Result<SimulationTrajectory<T>> {
    let (h, w) = grid;
    check_grid(h, w, false)?;
    if params.system != System::GrayScott {
        return Err(Error::InvalidParams("expected a GrayScott system".into()));
    }
    params.validate()?;
    if frames == 0 {
        return Err(Error::EmptyResult { frames });
    }

    let mut a = Array2::from_elem((h, w), T::one());
    let mut b = Array2::<T>::zeros((h, w));
    if params.initial == InitialCondition::SeededSquares {
        seed_squares(&mut a, &mut b, seed);
    }

    let (feed, kill) = (T::lit(params.feed), T::lit(params.kill));
    let (da, db) = (T::lit(params.diffusion_a), T::lit(params.diffusion_b));
    let dt = T::lit(params.dt);
    let upper = T::lit(UPPER_BOUND);
    let mut lap_a = Array2::zeros((h, w));
    let mut lap_b = Array2::zeros((h, w));

    let mut out_a = Array3::zeros((frames, h, w));
    let mut out_b = Array3::zeros((frames, h, w));
    let mut step = 0;
    for frame in 0..frames {
        if frame > 0 {
            for _ in 0..params.save_stride {
                laplacian(&a, &mut lap_a);
                laplacian(&b, &mut lap_b);
                ndarray::Zip::from(&mut a)
                    .and(&mut b)
                    .and(&lap_a)
                    .and(&lap_b)
                    .for_each(|a, b, &la, &lb| {
                        let (mut da_dt, mut db_dt) = (da * la, db * lb);
                        if params.reactions {
                            let abb = *a * *b * *b;
                            da_dt += feed * (T::one() - *a) - abb;
                            db_dt += abb - (feed + kill) * *b;
                        }
                        *a += dt * da_dt;
                        *b += dt * db_dt;
                    });
                step += 1;
                let bad = a
                    .iter()
                    .chain(b.iter())
                    .find(|v| !v.is_finite() || **v < T::zero() || **v > upper);
                if let Some(v) = bad {
                    return Err(Error::SolverBlowUp {
                        step,
                        detail: format!("concentration {v} outside [0, {UPPER_BOUND}]"),
                    });
                }
            }
        }
        out_a.index_axis_mut(Axis(0), frame).assign(&a);
        out_b.index_axis_mut(Axis(0), frame).assign(&b);
    }

    SimulationTrajectory::new(
        vec![("species_A".into(), out_a), ("species_B".into(), out_b)],
        params.clone(),
        seed,
        1,
    )
}
