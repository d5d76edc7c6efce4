use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient requested for non-scalar output with shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("no tensor bound to name `{0}`")]
    Unbound(String),
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite inversion loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("undefined criterion: both densities vanish at the query point")]
    UndefinedPoint,
    #[error("container format: {0}")]
    Container(String),
    #[error("config `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("missing artifact {path} (produced by `{producer}`)")]
    MissingArtifact { path: String, producer: String },
    #[error("artifact {path} has config hash {found}, expected {expected}")]
    HashMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("{context}: {inner}")]
    Context { context: String, inner: Box<Error> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            inner: Box::new(self),
        }
    }

    /// True for errors caused by bad configuration rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Context { inner, .. } => inner.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
