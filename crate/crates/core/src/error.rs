use std::path::PathBuf;

/// Errors produced by the multiscale solver and learning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular saddle-point system on coarse element {element}")]
    SingularSystem { element: usize },

    #[error("coarse element {element}: {message}")]
    LocalProblem { element: usize, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("Picard iteration did not converge at step {step} after {iterations} iterations (relative change {change:e})")]
    PicardNotConverged {
        step: usize,
        iterations: usize,
        change: f64,
    },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
