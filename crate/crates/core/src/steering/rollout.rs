use ndarray::{s, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::{steer, steer_per_token, Align, Mode, Renorm, SteeringConfig};
use crate::activation::{ActivationTensor, LayerId};
use crate::error::{Error, Result};
use crate::pde::SimulationTrajectory;
use crate::scalar::Scalar;
use crate::surrogate::{Checkpoint, Injector};

/// Applies [`steer`] (or its per-token variant) with a fixed, already
/// aligned direction.
pub struct SteeringInjector<T> {
    pub layer: LayerId,
    pub delta: Array4<T>,
    pub alpha: f64,
    pub renorm: Renorm,
}

impl<T: Scalar> Injector<T> for SteeringInjector<T> {
    fn layer(&self) -> LayerId {
        self.layer
    }

    fn inject(&self, a: &ActivationTensor<T>) -> Result<ActivationTensor<T>> {
        match self.renorm {
            Renorm::Global => steer(a, &self.delta, self.alpha),
            Renorm::PerToken => steer_per_token(a, &self.delta, self.alpha),
        }
    }
}

/// Steering metadata stored with a rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringRecord {
    pub concept: String,
    pub direction_hash: String,
    pub alpha: f64,
    pub mode: Mode,
    pub align: Align,
    pub renorm: Renorm,
    pub layer: LayerId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult<T> {
    /// Predicted frames only (the initial window is not repeated), in
    /// physical units.
    pub trajectory: SimulationTrajectory<T>,
    pub steering: Option<SteeringRecord>,
    /// Content hash of the matching unsteered rollout, when known.
    pub baseline_ref: Option<String>,
}

impl<T: Scalar> RolloutResult<T> {
    pub fn len(&self) -> usize {
        self.trajectory.frames()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[N, F, H, W]`.
    pub fn frames(&self) -> Array4<T> {
        let (h, w) = self.trajectory.grid();
        let mut out = Array4::zeros((self.len(), self.trajectory.field_count(), h, w));
        for (k, (_, data)) in self.trajectory.fields().enumerate() {
            out.index_axis_mut(Axis(1), k).assign(data);
        }
        out
    }

    pub fn content_hash(&self) -> String {
        self.trajectory.content_hash()
    }
}

/// Autoregressive rollout from the last `window_t` frames of `init`. With
/// `steering`, every forward pass replaces the target layer's activation by
/// its steered version.
pub fn rollout<T: Scalar>(
    ckpt: &Checkpoint<T>,
    init: &SimulationTrajectory<T>,
    steps: usize,
    steering: Option<&SteeringConfig<T>>,
) -> Result<RolloutResult<T>> {
    let model = &ckpt.model;
    let names = init.field_names();
    ckpt.normalizer.check_fields(&names)?;
    let wt = model.config.window_t;
    if init.frames() < wt {
        return Err(Error::InsufficientData {
            what: "initial frames for the rollout window",
            got: init.frames(),
            need: wt,
        });
    }
    let injector = match steering {
        Some(cfg) => {
            model.check_layer(cfg.layer)?;
            Some(SteeringInjector {
                layer: cfg.layer,
                delta: cfg.resolve(model.config.activation_shape())?,
                alpha: cfg.alpha,
                renorm: cfg.renorm,
            })
        }
        None => None,
    };
    let record = steering.map(|cfg| SteeringRecord {
        concept: cfg.direction.name.clone(),
        direction_hash: cfg.direction.content_hash(),
        alpha: cfg.alpha,
        mode: cfg.mode,
        align: cfg.align,
        renorm: cfg.renorm,
        layer: cfg.layer,
    });

    let all = ckpt.normalizer.normalize_trajectory(init)?;
    let mut window = all.slice(s![init.frames() - wt.., .., .., ..]).to_owned();
    let (h, w) = init.grid();
    let mut fields: Vec<(String, Array3<T>)> = names
        .iter()
        .map(|n| (n.clone(), Array3::zeros((steps, h, w))))
        .collect();
    for step in 0..steps {
        let out = model.forward(
            &window,
            injector.as_ref().map(|i| i as &dyn Injector<T>),
            &[],
        )?;
        let next = &window.index_axis(Axis(0), wt - 1) + &out.delta;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { frame: step });
        }
        let physical = ckpt.normalizer.denormalize_frame(&next);
        for (k, (_, data)) in fields.iter_mut().enumerate() {
            data.index_axis_mut(Axis(0), step).assign(&physical.index_axis(Axis(0), k));
        }
        for t in 0..wt - 1 {
            let later = window.index_axis(Axis(0), t + 1).to_owned();
            window.index_axis_mut(Axis(0), t).assign(&later);
        }
        window.index_axis_mut(Axis(0), wt - 1).assign(&next);
    }

    let mut trajectory = SimulationTrajectory::new(fields, init.params.clone(), init.seed, init.stride)?;
    if let Some(r) = &record {
        trajectory.extra.insert(
            "steering".into(),
            serde_json::to_value(r).expect("record serialises"),
        );
    }
    Ok(RolloutResult {
        trajectory,
        steering: record,
        baseline_ref: None,
    })
}
