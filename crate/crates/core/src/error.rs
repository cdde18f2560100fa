use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid {height}x{width}: {reason}")]
    InvalidGrid {
        height: usize,
        width: usize,
        reason: &'static str,
    },
    #[error("invalid physics parameters: {0}")]
    InvalidParams(String),
    #[error("solver blew up at step {step}: {detail}")]
    SolverBlowUp { step: usize, detail: String },
    #[error("subsampling leaves {frames} frame(s); at least 2 are required")]
    EmptyResult { frames: usize },
    #[error("invalid regime group spec: {0}")]
    InvalidGroupSpec(String),
    #[error("generating {group} member #{index} failed: {source}")]
    GroupMember {
        group: &'static str,
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown layer {layer} (model has {n_blocks} blocks)")]
    UnknownLayer { layer: String, n_blocks: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("gradient mismatch (max relative error {max_rel_error:.3e}) in: {params:?}")]
    GradientMismatch {
        params: Vec<String>,
        max_rel_error: f64,
    },
    #[error("corrupt trajectory file: {0}")]
    CorruptTrajectory(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("corrupt direction file: {0}")]
    CorruptDirection(String),
    #[error("corrupt activation set: {0}")]
    CorruptActivations(String),
    #[error("insufficient data for {what}: got {got}, need at least {need}")]
    InsufficientData {
        what: &'static str,
        got: usize,
        need: usize,
    },
    #[error("direction `{0}` has no full tensor")]
    MissingFullDirection(String),
    #[error("direction has zero norm but alpha = {alpha}")]
    ZeroDirection { alpha: f64 },
    #[error("cannot align direction of shape {from:?} to {to:?}: {reason}")]
    IncompatibleShapes {
        from: Vec<usize>,
        to: Vec<usize>,
        reason: String,
    },
    #[error("channel mismatch: direction has {found} channels, target has {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("invalid steering config: {0}")]
    InvalidSteering(String),
    #[error("rollout produced non-finite state at frame {frame}")]
    NonFiniteState { frame: usize },
    #[error("trajectory has no field `{0}`")]
    MissingField(String),
    #[error("inconsistent rollouts: {0}")]
    InconsistentRollouts(String),
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
