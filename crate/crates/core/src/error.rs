use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate direction: residual norm {0:e} after projection")]
    DegenerateDirection(f64),

    #[error("degenerate spectrum: could not draw a usable start vector for eigenpair {index}")]
    DegenerateSpectrum { index: usize },

    #[error("negative curvature {curvature:e} along CG direction exceeds PSD tolerance")]
    PsdViolation { curvature: f64 },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("differentiation order above two is not supported ({0})")]
    UnsupportedOrder(&'static str),

    #[error("training diverged at epoch {epoch}: train loss {loss}")]
    Divergence {
        epoch: usize,
        loss: f64,
        /// Parameters at the end of the last epoch whose loss was finite.
        last_good: Box<Vec<f64>>,
    },

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("checkpoint {path} is corrupt: content hash mismatch")]
    Corrupt { path: PathBuf },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure_dim {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Dimension(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure_dim;
