use thiserror::Error;

/// Coarse category of a failure; the CLI maps these onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical conditioning failed for {matrix} (jitter reached {jitter:e})")]
    Conditioning { matrix: String, jitter: f64 },

    #[error("unsupported projection: {0}")]
    UnsupportedProjection(String),

    #[error("rollout diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Stage { source, .. } => source.kind(),
            Error::Config(_) | Error::Input(_) | Error::UnsupportedProjection(_) => ErrorKind::Usage,
            Error::Conditioning { .. } | Error::Diverged { .. } => ErrorKind::Numerical,
            Error::Schema { .. } | Error::DimensionMismatch(_) | Error::Data(_) | Error::Io { .. } => {
                ErrorKind::Data
            }
        }
    }

    /// The error with any stage wrapper removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
