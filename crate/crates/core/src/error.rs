use thiserror::Error;

/// Errors raised by every module of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid label {label} (class count {n_classes})")]
    InvalidLabel { label: u8, n_classes: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("state error: {0}")]
    State(String),
    /// The inner error's text is part of the message, so it is not exposed
    /// as a separate source.
    #[error("node `{node}`: {inner}")]
    Node { node: String, inner: Box<Error> },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("training diverged at update {update}: loss {loss}")]
    Divergence { update: usize, loss: f64 },
    #[error("{path}: {cause}")]
    Io { path: String, cause: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn at_node(self, node: &str) -> Error {
        Error::Node {
            node: node.to_string(),
            inner: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, cause: std::io::Error) -> Error {
        Error::Io {
            path: path.as_ref().display().to_string(),
            cause,
        }
    }
}
