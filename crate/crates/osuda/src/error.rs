use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Binary tensor op applied to incompatible shapes.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Structural misuse that is not a two-shape mismatch (bad rank, empty
    /// spatial extent, channel count, label out of range, ...).
    #[error("{0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    /// Loss became NaN/Inf; `iter` is the failing iteration.
    #[error("non-finite loss {value} at iteration {iter}")]
    NonFiniteLoss { iter: usize, value: f64 },

    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// A tape supports exactly one backward pass.
    #[error("graph already consumed by a previous backward")]
    GraphConsumed,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Malformed on-disk artifact (checkpoint, dataset, config file).
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

impl Error {
    /// Closure factory for `.map_err(Error::io(path))`.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit code contract: 2 = configuration/input error,
    /// 3 = numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NonFiniteLoss { .. } | Error::NonFiniteGrad { .. } => 3,
            _ => 2,
        }
    }
}
