//! Error types shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("non-finite activation value in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite loss value")]
    NonFiniteLoss,
    #[error("gradient contains a non-finite entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite residual at point index {point}")]
    NonFiniteResidual { point: usize },
    #[error("empty observation set")]
    EmptyObservations,
    #[error("empty collocation set")]
    EmptyCollocation,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at stage {stage}, iteration {iteration}")]
    Divergence { stage: &'static str, iteration: usize },
    #[error("HMC chain rejected every proposal during burn-in")]
    AllRejected,
    #[error("degenerate recalibration factor (alpha = {alpha}); review the sigma floor")]
    DegenerateAlpha { alpha: f64 },
    #[error("missing recalibration factor for variable {0}")]
    MissingAlpha(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("step size underflow in ODE integrator at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("stride {stride} must be smaller than trajectory length {len}")]
    StrideTooLarge { stride: usize, len: usize },
    #[error("rejection sampling failed: mask covers the domain")]
    MaskCoversDomain,
    #[error("malformed CSV at line {line}: {message}")]
    MalformedCsv { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
