//! Scalar summaries of rollouts and ground-truth trajectories.

mod render;
mod report;

pub use render::{render_frames, value_range, Palette};
pub use report::{spearman, steering_report, ReportOptions, SteeringReport, Verdict};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::{SimulationTrajectory, System};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    /// One value per frame.
    pub values: Vec<f64>,
    pub units: String,
}

impl MetricSeries {
    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }
}

/// Grid spacing used for derivatives: the shear flow lives on the unit
/// square, Gray-Scott on a lattice of unit spacing.
pub fn grid_spacing<T: Scalar>(traj: &SimulationTrajectory<T>) -> f64 {
    match traj.params.system {
        System::ShearFlow => 1.0 / traj.grid().1 as f64,
        System::GrayScott => 1.0,
    }
}

fn wrap(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).rem_euclid(n as isize) as usize
}

/// `∂f/∂x` and `∂f/∂y` by periodic central differences; x runs along
/// columns, y along rows.
fn gradients<T: Scalar>(f: ArrayView2<T>, dx: f64) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = f.dim();
    let inv = 1.0 / (2.0 * dx);
    let at = |y: usize, x: usize| f[[y, x]].to_f64_lossy();
    let gx = Array2::from_shape_fn((h, w), |(y, x)| (at(y, wrap(x, 1, w)) - at(y, wrap(x, -1, w))) * inv);
    let gy = Array2::from_shape_fn((h, w), |(y, x)| (at(wrap(y, 1, h), x) - at(wrap(y, -1, h), x)) * inv);
    (gx, gy)
}

/// `ω = ∂v_y/∂x − ∂v_x/∂y` with periodic central differences.
pub fn vorticity_field<T: Scalar>(vx: ArrayView2<T>, vy: ArrayView2<T>, dx: f64) -> Result<Array2<f64>> {
    if vx.dim() != vy.dim() {
        return Err(Error::ShapeMismatch {
            context: "velocity components".into(),
            expected: vx.shape().to_vec(),
            found: vy.shape().to_vec(),
        });
    }
    if !(dx > 0.0) {
        return Err(Error::InvalidParams(format!("grid spacing must be positive, got {dx}")));
    }
    let (_, dvx_dy) = gradients(vx, dx);
    let (dvy_dx, _) = gradients(vy, dx);
    Ok(dvy_dx - dvx_dy)
}

fn per_frame_vorticity<T: Scalar>(
    traj: &SimulationTrajectory<T>,
    name: &str,
    units: &str,
    reduce: impl Fn(&Array2<f64>) -> f64,
) -> Result<MetricSeries> {
    let vx = traj.field("velocity_x")?;
    let vy = traj.field("velocity_y")?;
    let dx = grid_spacing(traj);
    let values = vx
        .axis_iter(Axis(0))
        .zip(vy.axis_iter(Axis(0)))
        .map(|(u, v)| vorticity_field(u, v, dx).map(|w| reduce(&w)))
        .collect::<Result<_>>()?;
    Ok(MetricSeries {
        name: name.into(),
        values,
        units: units.into(),
    })
}

/// Per-frame mean `|ω|`.
pub fn mean_abs_vorticity<T: Scalar>(traj: &SimulationTrajectory<T>) -> Result<MetricSeries> {
    per_frame_vorticity(traj, "mean_abs_vorticity", "1/time", |w| {
        w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64
    })
}

/// Per-frame mean `ω²`.
pub fn enstrophy<T: Scalar>(traj: &SimulationTrajectory<T>) -> Result<MetricSeries> {
    per_frame_vorticity(traj, "enstrophy", "1/time^2", |w| {
        w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64
    })
}

/// Per-frame mean gradient magnitude of `field`.
pub fn interface_sharpness<T: Scalar>(traj: &SimulationTrajectory<T>, field: &str) -> Result<MetricSeries> {
    let data = traj.field(field)?;
    let dx = grid_spacing(traj);
    let values = data
        .axis_iter(Axis(0))
        .map(|f| {
            let (gx, gy) = gradients(f, dx);
            let n = gx.len() as f64;
            gx.iter().zip(gy.iter()).map(|(a, b)| a.hypot(*b)).sum::<f64>() / n
        })
        .collect();
    Ok(MetricSeries {
        name: format!("interface_sharpness({field})"),
        values,
        units: format!("{field} per length"),
    })
}

/// First frame whose value reaches `threshold`.
pub fn time_to_threshold(series: &MetricSeries, threshold: f64) -> Option<usize> {
    series.values.iter().position(|&v| v >= threshold)
}

/// A named per-frame metric.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Metric {
    MeanAbsVorticity,
    Enstrophy,
    InterfaceSharpness(String),
}

impl Metric {
    pub fn compute<T: Scalar>(&self, traj: &SimulationTrajectory<T>) -> Result<MetricSeries> {
        match self {
            Self::MeanAbsVorticity => mean_abs_vorticity(traj),
            Self::Enstrophy => enstrophy(traj),
            Self::InterfaceSharpness(f) => interface_sharpness(traj, f),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MeanAbsVorticity => f.write_str("mean_abs_vorticity"),
            Self::Enstrophy => f.write_str("enstrophy"),
            Self::InterfaceSharpness(field) => write!(f, "interface_sharpness:{field}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    /// `mean_abs_vorticity`, `enstrophy`, `interface_sharpness[:field]`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, field) = match s.split_once(':') {
            Some((h, f)) => (h, Some(f)),
            None => (s, None),
        };
        match (head, field) {
            ("mean_abs_vorticity", None) => Ok(Self::MeanAbsVorticity),
            ("enstrophy", None) => Ok(Self::Enstrophy),
            ("interface_sharpness", f) => Ok(Self::InterfaceSharpness(f.unwrap_or("tracer").into())),
            _ => Err(Error::InvalidConfig(format!(
                "unknown metric `{s}` (expected mean_abs_vorticity, enstrophy or interface_sharpness[:field])"
            ))),
        }
    }
}

impl From<Metric> for String {
    fn from(m: Metric) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Metric {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::PhysicsParams;
    use ndarray::Array3;

    fn shear_traj(vx: Array3<f64>, vy: Array3<f64>) -> SimulationTrajectory<f64> {
        let tracer = Array3::zeros(vx.raw_dim());
        SimulationTrajectory::new(
            vec![
                ("tracer".into(), tracer.clone()),
                ("pressure".into(), tracer),
                ("velocity_x".into(), vx),
                ("velocity_y".into(), vy),
            ],
            PhysicsParams::shear_flow(1e-3, 1e-3),
            0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn uniform_flow_has_no_vorticity() {
        let w = vorticity_field(Array2::from_elem((8, 8), 1.5).view(), Array2::from_elem((8, 8), -0.5).view(), 0.1)
            .unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rigid_rotation_has_vorticity_two() {
        let n = 32;
        let dx = 0.1;
        let c = (n as f64 - 1.0) / 2.0;
        let vx = Array2::from_shape_fn((n, n), |(y, _)| -(y as f64 - c) * dx);
        let vy = Array2::from_shape_fn((n, n), |(_, x)| (x as f64 - c) * dx);
        let w = vorticity_field(vx.view(), vy.view(), dx).unwrap();
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                assert!((w[[y, x]] - 2.0).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn gradient_field_is_irrotational() {
        let n = 16;
        let dx = 1.0 / n as f64;
        let phi = |y: usize, x: usize| {
            let (xf, yf) = (x as f64 * dx, y as f64 * dx);
            (2.0 * std::f64::consts::PI * xf).sin() * (4.0 * std::f64::consts::PI * yf).cos()
        };
        // Discrete gradient with the same central stencil.
        let p = Array2::from_shape_fn((n, n), |(y, x)| phi(y, x));
        let (gx, gy) = gradients(p.view(), dx);
        let w = vorticity_field(gx.view(), gy.view(), dx).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn scaling_velocity_scales_metrics() {
        let vx = Array3::from_shape_fn((2, 8, 8), |(t, y, x)| ((x * 3 + y * 5 + t) % 7) as f64 * 0.1);
        let vy = Array3::from_shape_fn((2, 8, 8), |(t, y, x)| ((x * y + t) % 5) as f64 * 0.2);
        let a = shear_traj(vx.clone(), vy.clone());
        let b = shear_traj(&vx * 2.0, &vy * 2.0);
        let (ma, mb) = (mean_abs_vorticity(&a).unwrap(), mean_abs_vorticity(&b).unwrap());
        let (ea, eb) = (enstrophy(&a).unwrap(), enstrophy(&b).unwrap());
        for k in 0..2 {
            assert!((mb.values[k] - 2.0 * ma.values[k]).abs() < 1e-9 * mb.values[k]);
            assert!((eb.values[k] - 4.0 * ea.values[k]).abs() < 1e-9 * eb.values[k]);
        }
        let z = shear_traj(Array3::zeros((3, 8, 8)), Array3::zeros((3, 8, 8)));
        assert_eq!(mean_abs_vorticity(&z).unwrap().values, vec![0.0; 3]);
        assert_eq!(enstrophy(&z).unwrap().values, vec![0.0; 3]);
    }

    #[test]
    fn missing_velocity_is_reported() {
        let t = SimulationTrajectory::new(
            vec![("species_A".into(), Array3::<f64>::zeros((1, 4, 4)))],
            PhysicsParams::gray_scott(0.03, 0.06),
            0,
            1,
        )
        .unwrap();
        assert!(matches!(mean_abs_vorticity(&t), Err(Error::MissingField(_))));
        assert!(matches!(interface_sharpness(&t, "tracer"), Err(Error::MissingField(_))));
    }

    #[test]
    fn sharpness_cases() {
        let n = 32;
        let step = Array3::from_shape_fn((1, n, n), |(_, _, x)| if (8..24).contains(&x) { 1.0 } else { 0.0 });
        let smooth = Array3::from_shape_fn((1, n, n), |(_, _, x)| {
            let xf = x as f64;
            0.5 * ((xf - 8.0) / 3.0).tanh() - 0.5 * ((xf - 24.0) / 3.0).tanh()
        });
        let mk = |f: Array3<f64>| {
            let mut t = shear_traj(Array3::zeros((1, n, n)), Array3::zeros((1, n, n)));
            t = SimulationTrajectory::new(
                vec![("tracer".into(), f)],
                t.params.clone(),
                0,
                1,
            )
            .unwrap();
            t
        };
        let hard = interface_sharpness(&mk(step.clone()), "tracer").unwrap().values[0];
        let soft = interface_sharpness(&mk(smooth), "tracer").unwrap().values[0];
        assert!(hard > soft);
        let shifted = interface_sharpness(&mk(&step + 3.0), "tracer").unwrap().values[0];
        assert!((shifted - hard).abs() < 1e-12);
        let flat = interface_sharpness(&mk(Array3::from_elem((2, n, n), 0.7)), "tracer").unwrap();
        assert_eq!(flat.values, vec![0.0, 0.0]);
    }

    #[test]
    fn threshold_cases() {
        let s = |v: Vec<f64>| MetricSeries { name: "m".into(), values: v, units: String::new() };
        assert_eq!(time_to_threshold(&s(vec![1.0; 5]), 2.0), None);
        let ramp = s((0..20).map(|i| i as f64).collect());
        assert_eq!(time_to_threshold(&ramp, 10.0), Some(10));
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [Metric::MeanAbsVorticity, Metric::Enstrophy, Metric::InterfaceSharpness("tracer".into())] {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        assert_eq!("interface_sharpness".parse::<Metric>().unwrap(), Metric::InterfaceSharpness("tracer".into()));
        assert!("vortexness".parse::<Metric>().is_err());
    }
}
