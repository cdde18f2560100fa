//! Experiment pipeline, config handling and the SACT activation server for
//! `steerlab-core`.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod presets;
pub mod protocol;
pub mod validate;

pub use config::ExperimentConfig;
pub use error::{Diagnostic, PipelineError, Result};
pub use pipeline::{derive_seed, Pipeline, StageRun, STAGES};

use std::path::Path;

/// A preset name or the path of a TOML config.
pub fn load_config(spec: &str) -> Result<ExperimentConfig> {
    if let Some(c) = presets::preset(spec) {
        return Ok(c);
    }
    let path = Path::new(spec);
    if !path.exists() {
        let hint = validate::suggest(spec, presets::PRESETS)
            .map(|s| format!("; did you mean preset `{s}`?"))
            .unwrap_or_default();
        return Err(PipelineError::Config(vec![Diagnostic::new(
            "--config",
            format!("`{spec}` is neither a preset nor a file{hint}"),
        )]));
    }
    ExperimentConfig::from_toml(&std::fs::read_to_string(path)?)
}
