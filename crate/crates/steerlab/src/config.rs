//! Experiment configuration, read from TOML.
//!
//! ```toml
//! name = "vortex-shear"
//! seed = 7
//!
//! [data]
//! system = "shear_flow"
//! grid = [64, 64]
//! frames = 64
//! training = ["vortex", "diffusion", "speed"]
//!
//! [model]          # optional, defaults shown in `ModelSection`
//! [training]       # optional
//!
//! [concept]
//! name = "vortex"
//! layer = "blocks.1"
//!
//! [steering]
//! alphas = [-0.5, -0.25, 0.0, 0.25, 0.5]
//! mode = "channel_broadcast"
//! rollout_steps = 60
//! metric = "mean_abs_vorticity"
//!
//! [[steering.inits]]
//! name = "laminar"
//! seed = 9001
//! viscosity = 0.0133
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steerlab_core::metrics::Metric;
use steerlab_core::pde::{InitialCondition, PhysicsParams, System};
use steerlab_core::steering::{Align, Mode, Renorm, DEFAULT_ALPHA_LIMIT};
use steerlab_core::surrogate::{ModelConfig, Optimizer, TrainOptions};
use steerlab_core::LayerId;

use crate::error::{Diagnostic, PipelineError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed; every stage derives its own from it.
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    pub concept: ConceptSection,
    pub steering: SteeringSection,
    #[serde(default)]
    pub outputs: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub system: System,
    pub grid: [usize; 2],
    pub frames: usize,
    /// Regime-group presets whose trajectories (both groups) train the
    /// surrogate.
    pub training: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub window_t: usize,
    pub mlp_ratio: usize,
    pub attention: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::tiny(1, 64, 64);
        Self {
            patch_size: t.patch_size,
            embed_dim: t.embed_dim,
            n_blocks: t.n_blocks,
            n_heads: t.n_heads,
            window_t: t.window_t,
            mlp_ratio: t.mlp_ratio,
            attention: t.attention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub momentum: f64,
    pub clip: f64,
    pub holdout_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainOptions::default();
        Self {
            optimizer: d.optimizer,
            lr: d.lr,
            steps: d.steps,
            batch: d.batch,
            momentum: d.momentum,
            clip: d.clip,
            holdout_fraction: d.holdout_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSection {
    pub name: String,
    /// Regime-group preset providing the contrast groups; defaults to
    /// `name`. Ignored when `source` is set.
    #[serde(default)]
    pub groups: Option<String>,
    /// Take the direction from another experiment (preset name or config
    /// path) instead of extracting one here.
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub layer: Option<LayerId>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    steerlab_core::concepts::DEFAULT_EPSILON
}

impl ConceptSection {
    pub fn groups_preset(&self) -> &str {
        self.groups.as_deref().unwrap_or(&self.name)
    }
}

/// Threshold for time-to-threshold: a number, or the ground-truth metric
/// of the first init at a given rollout frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Value(f64),
    Calibrated { calibrate_frame: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringSection {
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub align: Align,
    #[serde(default)]
    pub renorm: Renorm,
    #[serde(default = "default_alpha_limit")]
    pub alpha_limit: f64,
    pub rollout_steps: usize,
    pub metric: Metric,
    #[serde(default)]
    pub eval_frame: Option<usize>,
    #[serde(default)]
    pub threshold: Option<Threshold>,
    pub inits: Vec<InitSpec>,
}

fn default_alpha_limit() -> f64 {
    DEFAULT_ALPHA_LIMIT
}

/// Ground-truth run whose first `window_t` frames seed the rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub viscosity: Option<f64>,
    #[serde(default)]
    pub schmidt: Option<f64>,
    #[serde(default)]
    pub forcing: Option<f64>,
    #[serde(default)]
    pub initial: Option<InitialCondition>,
    #[serde(default)]
    pub feed: Option<f64>,
    #[serde(default)]
    pub kill: Option<f64>,
}

impl InitSpec {
    pub fn params(&self, system: System) -> Result<PhysicsParams, String> {
        let mut p = match system {
            System::ShearFlow => {
                let nu = self.viscosity.ok_or("shear-flow inits need `viscosity`")?;
                PhysicsParams::shear_flow_schmidt(nu, self.schmidt.unwrap_or(1.0))
                    .with_forcing(self.forcing.unwrap_or(0.0))
            }
            System::GrayScott => {
                let (Some(f), Some(k)) = (self.feed, self.kill) else {
                    return Err("Gray-Scott inits need `feed` and `kill`".into());
                };
                PhysicsParams::gray_scott(f, k)
            }
        };
        if let Some(ic) = self.initial {
            p = p.with_initial(ic);
        }
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Stage outputs; `runs/<name>` when unset.
    pub dir: Option<PathBuf>,
    /// Content-addressed trajectories and checkpoints shared between
    /// experiments; `runs/cache` when unset.
    pub cache: Option<PathBuf>,
    pub render: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            cache: None,
            render: false,
        }
    }
}

impl ExperimentConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.outputs
            .dir
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&self.name))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.outputs.cache.clone().unwrap_or_else(|| Path::new("runs").join("cache"))
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            n_blocks: m.n_blocks,
            n_heads: m.n_heads,
            window_t: m.window_t,
            field_count: self.data.system.field_names().len(),
            height: self.data.grid[0],
            width: self.data.grid[1],
            mlp_ratio: m.mlp_ratio,
            attention: m.attention,
        }
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        let t = &self.training;
        TrainOptions {
            optimizer: t.optimizer,
            lr: t.lr,
            steps: t.steps,
            batch: t.batch,
            seed,
            momentum: t.momentum,
            clip: t.clip,
            holdout_fraction: t.holdout_fraction,
        }
    }

    /// Steering layer; the last block when unset.
    pub fn layer(&self) -> LayerId {
        self.concept
            .layer
            .unwrap_or(LayerId(self.model.n_blocks.saturating_sub(1)))
    }

    /// Parses TOML, reporting the path of the offending field on failure.
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| {
            PipelineError::Config(vec![Diagnostic::new("<document>", e.message().to_string())])
        })?;
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            PipelineError::Config(vec![Diagnostic::new(
                if path == "." { "<root>".into() } else { path },
                e.into_inner().to_string(),
            )])
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form, output locations left out.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(o) = v.as_object_mut() {
            o.remove("outputs");
        }
        crate::manifest::hash_json(&v)
    }
}
