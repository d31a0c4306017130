use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("unknown label {0}")]
    UnknownLabel(u8),

    #[error("empty torso: no middle-group pixels in parsing")]
    EmptyTorso,

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
