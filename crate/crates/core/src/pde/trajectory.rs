use std::collections::BTreeMap;

use ndarray::{s, Array3, ArrayView3, Axis};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::PhysicsParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Time-ordered multi-field snapshots on a uniform periodic grid.
///
/// Every field is stored as `[T, H, W]` with `H` along y and `W` along x.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTrajectory<T> {
    fields: Vec<(String, Array3<T>)>,
    pub params: PhysicsParams,
    pub seed: u64,
    /// Cumulative subsampling factor applied after generation.
    pub stride: usize,
    /// Free-form metadata carried into the file header (steering metadata
    /// for rollouts, for instance).
    pub extra: BTreeMap<String, Value>,
}

impl<T: Scalar> SimulationTrajectory<T> {
    pub fn new(
        fields: Vec<(String, Array3<T>)>,
        params: PhysicsParams,
        seed: u64,
        stride: usize,
    ) -> Result<Self> {
        let Some((_, first)) = fields.first() else {
            return Err(Error::MissingField("<any>".into()));
        };
        let dim = first.dim();
        for (name, data) in &fields {
            if data.dim() != dim {
                return Err(Error::ShapeMismatch {
                    context: format!("trajectory field `{name}`"),
                    expected: vec![dim.0, dim.1, dim.2],
                    found: data.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            fields,
            params,
            seed,
            stride,
            extra: BTreeMap::new(),
        })
    }

    /// Builds a trajectory from per-frame stacks `[F, H, W]`.
    pub fn from_frames(
        names: &[String],
        frames: &[Array3<T>],
        params: PhysicsParams,
        seed: u64,
        stride: usize,
    ) -> Result<Self> {
        let (f, h, w) = frames
            .first()
            .map(|a| a.dim())
            .unwrap_or((names.len(), 0, 0));
        if f != names.len() {
            return Err(Error::ShapeMismatch {
                context: "frame stack field count".into(),
                expected: vec![names.len()],
                found: vec![f],
            });
        }
        let mut fields: Vec<(String, Array3<T>)> = names
            .iter()
            .map(|n| (n.clone(), Array3::zeros((frames.len(), h, w))))
            .collect();
        for (t, frame) in frames.iter().enumerate() {
            if frame.dim() != (f, h, w) {
                return Err(Error::ShapeMismatch {
                    context: format!("frame {t}"),
                    expected: vec![f, h, w],
                    found: frame.shape().to_vec(),
                });
            }
            for (k, (_, data)) in fields.iter_mut().enumerate() {
                data.index_axis_mut(Axis(0), t).assign(&frame.index_axis(Axis(0), k));
            }
        }
        Self::new(fields, params, seed, stride)
    }

    pub fn frames(&self) -> usize {
        self.fields[0].1.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.fields[0].1.dim();
        (h, w)
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn fields(&self) -> impl Iterator<Item = (&str, &Array3<T>)> {
        self.fields.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    pub fn field(&self, name: &str) -> Result<ArrayView3<'_, T>> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a.view())
            .ok_or_else(|| Error::MissingField(name.to_string()))
    }

    /// Stack of all fields at frame `t`: `[F, H, W]`.
    pub fn frame(&self, t: usize) -> Array3<T> {
        let (h, w) = self.grid();
        let mut out = Array3::zeros((self.fields.len(), h, w));
        for (k, (_, data)) in self.fields.iter().enumerate() {
            out.index_axis_mut(Axis(0), k).assign(&data.index_axis(Axis(0), t));
        }
        out
    }

    /// Keeps frames `start..end`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        let fields = self
            .fields
            .iter()
            .map(|(n, a)| (n.clone(), a.slice(s![start..end, .., ..]).to_owned()))
            .collect();
        Self {
            fields,
            params: self.params.clone(),
            seed: self.seed,
            stride: self.stride,
            extra: self.extra.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> SimulationTrajectory<U> {
        SimulationTrajectory {
            fields: self
                .fields
                .iter()
                .map(|(n, a)| (n.clone(), a.mapv(|v| U::lit(v.to_f64_lossy()))))
                .collect(),
            params: self.params.clone(),
            seed: self.seed,
            stride: self.stride,
            extra: self.extra.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over field names and float32 payloads.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, data) in &self.fields {
            hasher.update(name.as_bytes());
            hasher.update(
                data.shape()
                    .iter()
                    .flat_map(|d| (*d as u64).to_le_bytes())
                    .collect::<Vec<_>>(),
            );
            for v in data.iter() {
                hasher.update(v.to_f32_lossy().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Keeps frames `0, stride, 2·stride, …`.
pub fn subsample_stride<T: Scalar>(
    traj: &SimulationTrajectory<T>,
    stride: usize,
) -> Result<SimulationTrajectory<T>> {
    if stride == 0 {
        return Err(Error::InvalidParams("stride must be >= 1".into()));
    }
    let fields: Vec<_> = traj
        .fields
        .iter()
        .map(|(n, a)| (n.clone(), a.slice(s![..;stride, .., ..]).to_owned()))
        .collect();
    let frames = fields[0].1.dim().0;
    if frames < 2 {
        return Err(Error::EmptyResult { frames });
    }
    let mut params = traj.params.clone();
    params.save_stride *= stride;
    Ok(SimulationTrajectory {
        fields,
        params,
        seed: traj.seed,
        stride: traj.stride * stride,
        extra: traj.extra.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::PhysicsParams;

    fn ramp(frames: usize) -> SimulationTrajectory<f64> {
        let a = Array3::from_shape_fn((frames, 4, 4), |(t, y, x)| (t * 100 + y * 4 + x) as f64);
        SimulationTrajectory::new(
            vec![("tracer".into(), a.clone()), ("pressure".into(), -a)],
            PhysicsParams::shear_flow(0.01, 0.01),
            0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn stride_one_is_identity() {
        let t = ramp(8);
        let s = subsample_stride(&t, 1).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn stride_two_takes_even_frames() {
        let t = ramp(64);
        let s = subsample_stride(&t, 2).unwrap();
        assert_eq!(s.frames(), 32);
        assert_eq!(s.params.save_stride, 16);
        for i in 0..32 {
            assert_eq!(s.frame(i), t.frame(2 * i));
        }
    }

    #[test]
    fn stride_composes() {
        let t = ramp(64);
        let twice = subsample_stride(&subsample_stride(&t, 2).unwrap(), 2).unwrap();
        let direct = subsample_stride(&t, 4).unwrap();
        assert_eq!(twice, direct);
    }

    #[test]
    fn too_few_frames_is_empty_result() {
        let t = ramp(3);
        assert!(matches!(
            subsample_stride(&t, 3),
            Err(Error::EmptyResult { frames: 1 })
        ));
    }

    #[test]
    fn mismatched_fields_rejected() {
        let r = SimulationTrajectory::new(
            vec![
                ("a".into(), Array3::<f32>::zeros((2, 4, 4))),
                ("b".into(), Array3::<f32>::zeros((2, 4, 5))),
            ],
            PhysicsParams::shear_flow(0.01, 0.01),
            0,
            1,
        );
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }
}
