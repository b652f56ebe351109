use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("non-finite activation")]
    NonFinite,

    #[error("empty cache")]
    EmptyCache,

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error("odd rotary dims {0}")]
    OddRotary(usize),

    #[error("underdetermined fit: {free} free parameters ({names}) but {rows} independent rows")]
    Underdetermined { free: usize, rows: usize, names: String },

    #[error("measurement table row {row}: {msg}")]
    Measurement { row: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
