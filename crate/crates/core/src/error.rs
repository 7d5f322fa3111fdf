use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TartError>;

#[derive(Debug, Error)]
pub enum TartError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("singular or ill-conditioned matrix (pivot ratio {pivot_ratio:e})")]
    SingularMatrix { pivot_ratio: f64 },

    /// The normalized prototype matrix is rank deficient. `classes` names the
    /// pair of episode classes whose prototypes are closest to colliding.
    #[error("degenerate task: prototypes of classes {} and {} collide", classes.0, classes.1)]
    DegenerateTask { classes: (usize, usize) },

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("format error in {}{}: {msg}", path.display(), line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Format {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TartError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TartError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: Option<usize>, msg: impl Into<String>) -> Self {
        TartError::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TartError::Io {
            path: path.into(),
            source,
        }
    }
}
