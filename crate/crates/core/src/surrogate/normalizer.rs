use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::SimulationTrajectory;
use crate::scalar::Scalar;

/// Per-field z-score statistics of the training data, plus the RMS of
/// normalised frame-to-frame deltas (the decoder's output unit).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub fields: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub delta_scale: Vec<f64>,
}

const MIN_STD: f64 = 1e-8;

impl Normalizer {
    pub fn fit<T: Scalar>(trajs: &[SimulationTrajectory<T>]) -> Result<Self> {
        let first = trajs.first().ok_or(Error::InsufficientData {
            what: "normalizer",
            got: 0,
            need: 1,
        })?;
        let fields = first.field_names();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut delta_scale = Vec::new();
        for name in &fields {
            let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
            for t in trajs {
                for v in t.field(name)?.iter() {
                    let v = v.to_f64_lossy();
                    n += 1;
                    sum += v;
                    sq += v * v;
                }
            }
            let m = sum / n as f64;
            let s = (sq / n as f64 - m * m).max(0.0).sqrt().max(MIN_STD);
            let (mut dn, mut dsq) = (0usize, 0.0f64);
            for t in trajs {
                let a = t.field(name)?;
                for k in 1..a.dim().0 {
                    for (x1, x0) in a.index_axis(Axis(0), k).iter().zip(a.index_axis(Axis(0), k - 1).iter()) {
                        let d = (x1.to_f64_lossy() - x0.to_f64_lossy()) / s;
                        dn += 1;
                        dsq += d * d;
                    }
                }
            }
            mean.push(m);
            std.push(s);
            delta_scale.push(if dn == 0 { 1.0 } else { (dsq / dn as f64).sqrt().max(MIN_STD) });
        }
        Ok(Self {
            fields,
            mean,
            std,
            delta_scale,
        })
    }

    pub fn check_fields(&self, names: &[String]) -> Result<()> {
        if names != self.fields.as_slice() {
            return Err(Error::ShapeMismatch {
                context: format!("field layout {:?} vs normalizer {:?}", names, self.fields),
                expected: vec![self.fields.len()],
                found: vec![names.len()],
            });
        }
        Ok(())
    }

    /// Normalises a `[F, H, W]` frame.
    pub fn normalize_frame<T: Scalar>(&self, frame: &Array3<T>) -> Array3<T> {
        let mut out = frame.clone();
        for (f, mut plane) in out.outer_iter_mut().enumerate() {
            let (m, s) = (T::lit(self.mean[f]), T::lit(self.std[f]));
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn denormalize_frame<T: Scalar>(&self, frame: &Array3<T>) -> Array3<T> {
        let mut out = frame.clone();
        for (f, mut plane) in out.outer_iter_mut().enumerate() {
            let (m, s) = (T::lit(self.mean[f]), T::lit(self.std[f]));
            plane.mapv_inplace(|v| v * s + m);
        }
        out
    }

    /// Whole trajectory as normalised `[frames, F, H, W]`.
    pub fn normalize_trajectory<T: Scalar>(&self, traj: &SimulationTrajectory<T>) -> Result<Array4<T>> {
        self.check_fields(&traj.field_names())?;
        let (h, w) = traj.grid();
        let mut out = Array4::zeros((traj.frames(), traj.field_count(), h, w));
        for t in 0..traj.frames() {
            out.index_axis_mut(Axis(0), t)
                .assign(&self.normalize_frame(&traj.frame(t)));
        }
        Ok(out)
    }
}
