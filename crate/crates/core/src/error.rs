use thiserror::Error;

#[derive(Debug, Error)]
pub enum MerpoError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("conservative evaluation diverged at sweep {sweep} (residual {residual:e})")]
    Divergence { sweep: usize, residual: f64 },

    #[error("non-finite value in {0}; the learning rate is probably too large")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<MerpoError>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MerpoError>;

/// Io error with the offending path in the message.
pub(crate) fn io_at(path: &std::path::Path, e: std::io::Error) -> MerpoError {
    MerpoError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
