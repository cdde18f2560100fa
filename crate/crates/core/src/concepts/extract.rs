use ndarray::{s, Array4};

use crate::activation::{ActivationTensor, LayerId};
use crate::error::{Error, Result};
use crate::pde::SimulationTrajectory;
use crate::scalar::Scalar;
use crate::surrogate::Checkpoint;

/// Starts of the non-overlapping windows of length `window` in `frames`.
pub fn window_starts(frames: usize, window: usize) -> Vec<usize> {
    if window == 0 {
        return Vec::new();
    }
    (0..frames / window).map(|i| i * window).collect()
}

/// Runs the surrogate over every non-overlapping window of `traj` and
/// returns the activation captured at `layer` for each.
pub fn extract_activations<T: Scalar>(
    ckpt: &Checkpoint<T>,
    traj: &SimulationTrajectory<T>,
    layer: LayerId,
) -> Result<Vec<ActivationTensor<T>>> {
    ckpt.model.check_layer(layer)?;
    ckpt.normalizer.check_fields(&traj.field_names())?;
    let wt = ckpt.model.config.window_t;
    let starts = window_starts(traj.frames(), wt);
    if starts.is_empty() {
        return Err(Error::InsufficientData {
            what: "trajectory frames for one extraction window",
            got: traj.frames(),
            need: wt,
        });
    }
    let data: Array4<T> = ckpt.normalizer.normalize_trajectory(traj)?;
    let hash = traj.content_hash();
    starts
        .into_iter()
        .map(|start| {
            let window = data.slice(s![start..start + wt, .., .., ..]).to_owned();
            let mut out = ckpt.model.forward(&window, None, &[layer])?;
            let mut act = out.taps.remove(&layer).expect("tap requested");
            act.source = format!("{}@{start}", &hash[..16]);
            Ok(act)
        })
        .collect()
}
