use std::fmt;

use steerlab_core::Error as CoreError;
use thiserror::Error;

/// One problem found in a config, addressed by its path (`steering.alphas`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<Diagnostic>),
    #[error("missing artifact: {what} (run the `{stage}` stage first)")]
    MissingArtifact { stage: &'static str, what: String },
    #[error("stale artifact {path}: manifest records {expected}, found {found}")]
    StaleArtifact {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{0}")]
    Protocol(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 1 validation, 2 missing or unusable artifact, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Protocol(_) => 1,
            Self::MissingArtifact { .. } | Self::StaleArtifact { .. } | Self::Io(_) => 2,
            Self::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::SolverBlowUp { .. }
        | CoreError::Diverged { .. }
        | CoreError::NonFiniteState { .. }
        | CoreError::GradientMismatch { .. }
        | CoreError::ZeroDirection { .. } => 3,
        CoreError::GroupMember { source, .. } => core_exit_code(source),
        CoreError::CorruptTrajectory(_)
        | CoreError::CorruptCheckpoint(_)
        | CoreError::CorruptDirection(_)
        | CoreError::CorruptActivations(_)
        | CoreError::Io(_) => 2,
        _ => 1,
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
