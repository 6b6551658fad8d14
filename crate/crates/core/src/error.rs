use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("random sequential addition jammed: {attempts} consecutive rejections with {placed} of {target} centers placed")]
    JammingFailure {
        attempts: usize,
        placed: usize,
        target: usize,
    },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("grid too coarse: h = {h} exceeds {limit} ({reason})")]
    ResolutionTooCoarse {
        h: f64,
        limit: f64,
        reason: &'static str,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("Krylov solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
