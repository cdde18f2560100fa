//! Autoregressive one-step training with cosine learning-rate decay and
//! global-norm clipping.

use ndarray::{s, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingMeta};
use super::config::ModelConfig;
use super::loss::mse_loss;
use super::model::Surrogate;
use super::normalizer::Normalizer;
use crate::error::{Error, Result};
use crate::pde::SimulationTrajectory;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// SGD with heavy-ball momentum.
    Sgd,
    /// Adam (beta2 = 0.999, eps = 1e-8); `momentum` is beta1.
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    #[serde(default)]
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Global gradient-norm clip.
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Fraction of each trajectory's windows (taken from its end) held out.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_clip() -> f64 {
    1.0
}
fn default_holdout() -> f64 {
    0.125
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            lr: 2e-3,
            steps: 2000,
            batch: 8,
            seed: 0,
            momentum: default_momentum(),
            clip: default_clip(),
            holdout_fraction: default_holdout(),
        }
    }
}

/// Normalised training windows cut from a set of trajectories.
pub struct WindowSet<T> {
    data: Vec<Array4<T>>,
    window_t: usize,
    pub train: Vec<(usize, usize)>,
    pub holdout: Vec<(usize, usize)>,
}

impl<T: Scalar> WindowSet<T> {
    pub fn new(
        trajs: &[SimulationTrajectory<T>],
        normalizer: &Normalizer,
        window_t: usize,
        holdout_fraction: f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(trajs.len());
        let mut train = Vec::new();
        let mut holdout = Vec::new();
        for (i, t) in trajs.iter().enumerate() {
            data.push(normalizer.normalize_trajectory(t)?);
            let windows = t.frames().saturating_sub(window_t);
            let held = ((windows as f64) * holdout_fraction).round() as usize;
            for start in 0..windows {
                if start + held >= windows {
                    holdout.push((i, start));
                } else {
                    train.push((i, start));
                }
            }
        }
        Ok(Self {
            data,
            window_t,
            train,
            holdout,
        })
    }

    /// Input window and target `(next − last)` in normalised field units.
    pub fn sample(&self, (traj, start): (usize, usize)) -> (Array4<T>, Array3<T>) {
        let d = &self.data[traj];
        let window = d.slice(s![start..start + self.window_t, .., .., ..]).to_owned();
        let next = d.index_axis(Axis(0), start + self.window_t);
        let last = d.index_axis(Axis(0), start + self.window_t - 1);
        (window, &next - &last)
    }
}

fn scaled_target<T: Scalar>(delta: &Array3<T>, scale: &ndarray::Array1<T>) -> Array3<T> {
    let mut out = delta.clone();
    for (mut plane, &s) in out.outer_iter_mut().zip(scale.iter()) {
        plane.mapv_inplace(|v| v / s);
    }
    out
}

/// Loss and gradient of one window.
fn sample_grad<T: Scalar>(
    model: &Surrogate<T>,
    window: &Array4<T>,
    target: &Array3<T>,
    weight: T,
) -> Result<(T, Surrogate<T>)> {
    let (out, cache) = model.forward_train(window)?;
    let loss = mse_loss(&out.view(), &target.view())?;
    let n = T::from_usize_lossy(out.len());
    let two = T::lit(2.0);
    let d_out = (&out - target).mapv(|d| two * d * weight / n);
    let mut grad = model.zeros_like();
    model.backward(&cache, &d_out, &mut grad);
    Ok((loss, grad))
}

/// Mean loss and summed, weighted gradient over a batch. Per-sample work
/// runs in parallel; the reduction is sequential so results do not depend
/// on the thread count.
pub(crate) fn batch_grad<T: Scalar>(
    model: &Surrogate<T>,
    samples: &[(Array4<T>, Array3<T>)],
) -> Result<(T, Surrogate<T>)> {
    let weight = T::one() / T::from_usize_lossy(samples.len());
    let parts: Vec<(T, Surrogate<T>)> = samples
        .par_iter()
        .map(|(w, t)| sample_grad(model, w, t, weight))
        .collect::<Result<_>>()?;
    let mut total = model.zeros_like();
    let mut loss = T::zero();
    for (l, g) in parts {
        loss += l * weight;
        let flat = g.flat();
        let mut k = 0;
        total.visit_mut(&mut |_, _, d| {
            for v in d.iter_mut() {
                *v += flat[k];
                k += 1;
            }
        });
    }
    Ok((loss, total))
}

/// Mean one-step loss of the model and of the zero-delta predictor on the
/// given windows, both in decoder output units.
pub fn evaluate<T: Scalar>(
    model: &Surrogate<T>,
    windows: &WindowSet<T>,
    which: &[(usize, usize)],
) -> Result<(f64, f64)> {
    let results: Vec<(f64, f64)> = which
        .par_iter()
        .map(|&idx| {
            let (w, delta) = windows.sample(idx);
            let target = scaled_target(&delta, &model.output_scale);
            let (out, _) = model.forward_train(&w)?;
            let model_mse = mse_loss(&out.view(), &target.view())?.to_f64_lossy();
            let zero = Array3::zeros(target.raw_dim());
            let base = mse_loss(&zero.view(), &target.view())?.to_f64_lossy();
            Ok((model_mse, base))
        })
        .collect::<Result<_>>()?;
    let n = results.len().max(1) as f64;
    let (a, b) = results
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    Ok((a / n, b / n))
}

/// Trains a fresh surrogate on `trajs`.
pub fn train<T: Scalar>(
    trajs: &[SimulationTrajectory<T>],
    config: ModelConfig,
    opts: &TrainOptions,
) -> Result<Checkpoint<T>> {
    train_with_progress(trajs, config, opts, |_, _| {})
}

pub fn train_with_progress<T: Scalar>(
    trajs: &[SimulationTrajectory<T>],
    config: ModelConfig,
    opts: &TrainOptions,
    mut progress: impl FnMut(usize, f64),
) -> Result<Checkpoint<T>> {
    let first = trajs.first().ok_or(Error::InsufficientData {
        what: "training trajectories",
        got: 0,
        need: 1,
    })?;
    let names = first.field_names();
    for t in trajs {
        if t.grid() != first.grid() || t.field_names() != names {
            return Err(Error::ShapeMismatch {
                context: "training trajectories must share grid and fields".into(),
                expected: vec![first.grid().0, first.grid().1, names.len()],
                found: vec![t.grid().0, t.grid().1, t.field_count()],
            });
        }
    }
    let (h, w) = first.grid();
    if (config.height, config.width, config.field_count) != (h, w, names.len()) {
        return Err(Error::InvalidConfig(format!(
            "config expects {}x{} with {} fields, data is {h}x{w} with {}",
            config.height,
            config.width,
            config.field_count,
            names.len()
        )));
    }

    let normalizer = Normalizer::fit(trajs)?;
    let mut model = Surrogate::<T>::new(config.clone(), opts.seed)?;
    model.output_scale = normalizer.delta_scale.iter().map(|&v| T::lit(v)).collect();
    let windows = WindowSet::new(trajs, &normalizer, config.window_t, opts.holdout_fraction)?;
    if windows.train.is_empty() {
        return Err(Error::InsufficientData {
            what: "training windows",
            got: 0,
            need: 1,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f_7a1e);
    let mut order = windows.train.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut velocity = vec![T::zero(); model.parameter_count()];
    let mut second = match opts.optimizer {
        Optimizer::Adam => vec![T::zero(); model.parameter_count()],
        Optimizer::Sgd => Vec::new(),
    };
    let momentum = T::lit(opts.momentum);
    let beta2 = T::lit(0.999);
    let mut initial_loss = None;
    let mut final_loss = f64::NAN;

    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch.max(1) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let (win, delta) = windows.sample(idx);
            batch.push((win, scaled_target(&delta, &model.output_scale)));
        }
        let (loss, grad) = batch_grad(&model, &batch)?;
        let loss = loss.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        initial_loss.get_or_insert(loss);
        final_loss = loss;

        let g = grad.flat();
        let norm = g.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: norm });
        }
        let clip = if norm > opts.clip { opts.clip / norm } else { 1.0 };
        let lr = opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / opts.steps as f64).cos());
        let update: Vec<T> = match opts.optimizer {
            Optimizer::Sgd => {
                let clip = T::lit(clip);
                for (v, &gi) in velocity.iter_mut().zip(&g) {
                    *v = momentum * *v + gi * clip;
                }
                velocity.iter().map(|&v| T::lit(lr) * v).collect()
            }
            Optimizer::Adam => {
                let t = (step + 1) as i32;
                let c1 = 1.0 - opts.momentum.powi(t);
                let c2 = 1.0 - 0.999f64.powi(t);
                let step_size = T::lit(lr * c2.sqrt() / c1);
                let eps = T::lit(1e-8 * c2.sqrt());
                let clip = T::lit(clip);
                let one = T::one();
                velocity
                    .iter_mut()
                    .zip(second.iter_mut())
                    .zip(&g)
                    .map(|((m, v), &gi)| {
                        let gi = gi * clip;
                        *m = momentum * *m + (one - momentum) * gi;
                        *v = beta2 * *v + (one - beta2) * gi * gi;
                        step_size * *m / (v.sqrt() + eps)
                    })
                    .collect()
            }
        };
        let mut k = 0;
        model.visit_mut(&mut |_, _, d| {
            for p in d.iter_mut() {
                *p -= update[k];
                k += 1;
            }
        });
        progress(step, loss);
    }

    let (holdout_mse, persistence_mse, holdout_checked) =
        if opts.steps > 0 && !windows.holdout.is_empty() {
            let (m, b) = evaluate(&model, &windows, &windows.holdout)?;
            (Some(m), Some(b), true)
        } else {
            (None, None, false)
        };

    Ok(Checkpoint {
        model,
        normalizer,
        meta: TrainingMeta {
            steps: opts.steps,
            seed: opts.seed,
            initial_loss,
            final_loss: final_loss.is_finite().then_some(final_loss),
            holdout_mse,
            persistence_mse,
            holdout_checked,
            train_windows: windows.train.len(),
            holdout_windows: windows.holdout.len(),
        },
    })
}
