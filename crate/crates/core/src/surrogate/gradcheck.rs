//! Finite-difference check of the hand-written backward pass.

use ndarray::{Array3, Array4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ModelConfig;
use super::layers::normal;
use super::loss::mse_loss;
use super::model::Surrogate;
use crate::error::{Error, Result};

const STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct Probe {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub parameter_count: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Tolerance for `config`: tighter when no attention sublayer is present.
pub fn tolerance(config: &ModelConfig) -> f64 {
    if !config.attention || config.n_blocks == 0 {
        1e-5
    } else {
        1e-3
    }
}

/// Gradients that vanish exactly (e.g. key biases under softmax) leave only
/// round-off in the difference quotient, hence the absolute floor.
const FLOOR: f64 = 1e-6;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn loss(model: &Surrogate<f64>, window: &Array4<f64>, target: &Array3<f64>) -> Result<f64> {
    let (out, _) = model.forward_train(window)?;
    mse_loss(&out.view(), &target.view())
}

fn nudge(model: &mut Surrogate<f64>, index: usize, by: f64) {
    let mut k = 0;
    model.visit_mut(&mut |_, _, d| {
        if (k..k + d.len()).contains(&index) {
            d[index - k] += by;
        }
        k += d.len();
    });
}

/// Compares analytic gradients of the MSE loss against central differences
/// for `probe_count` randomly chosen parameters, in f64.
pub fn gradient_check(config: &ModelConfig, probe_count: usize, seed: u64) -> Result<GradCheckReport> {
    let mut model = Surrogate::<f64>::new(config.clone(), seed)?;
    let n = model.parameter_count();
    let tol = tolerance(config);
    if probe_count == 0 {
        return Ok(GradCheckReport {
            parameter_count: n,
            tolerance: tol,
            max_rel_error: 0.0,
            probes: Vec::new(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    // Larger weights than the init so that every path carries signal.
    model.visit_mut(&mut |_, _, d| {
        for v in d.iter_mut() {
            *v += normal::<f64, _>(&mut rng, 0.3);
        }
    });
    let c = &model.config;
    let window = Array4::from_shape_simple_fn((c.window_t, c.field_count, c.height, c.width), || {
        normal(&mut rng, 1.0)
    });
    let target =
        Array3::from_shape_simple_fn((c.field_count, c.height, c.width), || normal(&mut rng, 1.0));

    let (out, cache) = model.forward_train(&window)?;
    let scale = 2.0 / out.len() as f64;
    let d_out = (&out - &target).mapv(|d| d * scale);
    let mut grad = model.zeros_like();
    model.backward(&cache, &d_out, &mut grad);
    let analytic = grad.flat();

    let mut names = Vec::with_capacity(n);
    model.visit(&mut |name, _, d| names.extend((0..d.len()).map(|i| format!("{name}[{i}]"))));

    let mut probes = Vec::new();
    for idx in sample(&mut rng, n, probe_count.min(n)).into_vec() {
        let mut m = model.clone();
        nudge(&mut m, idx, STEP);
        let up = loss(&m, &window, &target)?;
        nudge(&mut m, idx, -2.0 * STEP);
        let down = loss(&m, &window, &target)?;
        let numeric = (up - down) / (2.0 * STEP);
        probes.push(Probe {
            name: names[idx].clone(),
            analytic: analytic[idx],
            numeric,
            rel_error: rel_error(analytic[idx], numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    let bad: Vec<String> = probes
        .iter()
        .filter(|p| !(p.rel_error < tol))
        .map(|p| p.name.clone())
        .collect();
    if !bad.is_empty() {
        return Err(Error::GradientMismatch {
            params: bad,
            max_rel_error,
        });
    }
    Ok(GradCheckReport {
        parameter_count: n,
        tolerance: tol,
        max_rel_error,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(attention: bool, blocks: usize) -> ModelConfig {
        ModelConfig {
            patch_size: 2,
            embed_dim: 8,
            n_blocks: blocks,
            n_heads: 2,
            window_t: 2,
            field_count: 2,
            height: 4,
            width: 6,
            mlp_ratio: 2,
            attention,
        }
    }

    #[test]
    fn empty_probe_set_passes() {
        let r = gradient_check(&small(true, 1), 0, 1).unwrap();
        assert!(r.passed() && r.probes.is_empty());
    }

    #[test]
    fn linear_path_is_exact() {
        let r = gradient_check(&small(false, 0), 40, 2).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn mlp_only_blocks() {
        let r = gradient_check(&small(false, 2), 60, 3).unwrap();
        assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    }

    #[test]
    fn full_blocks() {
        let r = gradient_check(&small(true, 2), 80, 4).unwrap();
        assert!(r.max_rel_error < 1e-3, "{}", r.max_rel_error);
    }

    #[test]
    fn tiny_config_on_small_grid() {
        let r = gradient_check(&ModelConfig::tiny(4, 16, 16), 50, 5).unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }
}
