use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Violations of the `ei-predict/1` wire protocol.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("protocol version mismatch: expected {expected}, server speaks {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("task mismatch: requested {requested}, server serves {served}")]
    TaskMismatch { requested: String, served: String },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("response id {found} does not match request id {expected}")]
    IdMismatch { expected: u64, found: u64 },
    #[error("expected {expected} outputs, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid probability vector at row {row}: {reason}")]
    InvalidProbabilities { row: usize, reason: String },
}

/// Failures raised while obtaining predictions.
///
/// Transport failures (the model could not be reached) are kept apart from
/// protocol violations and from errors the model itself reported.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("model error: {0}")]
    Model(String),
    #[error("invalid input rows: {0}")]
    InvalidRows(String),
}

impl PredictError {
    pub fn is_transport(&self) -> bool {
        matches!(self, PredictError::Transport(_))
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("input text is empty")]
    EmptyText,
    #[error("span [{start}, {end}) is out of range for a sentence of length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("gram size {gram} is invalid for a row of length {len}")]
    InvalidGram { gram: usize, len: usize },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task mismatch: {0}")]
    TaskMismatch(String),
    #[error("baseline {0} is too close to zero for a percentage change")]
    DegenerateBaseline(f64),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
