use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corruption in {path}: sample {sample_uid}: {reason}")]
    Corruption {
        path: PathBuf,
        sample_uid: u64,
        reason: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-greppable code printed by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Config(_) => "E_CONFIG",
            Error::Data(_) => "E_DATA",
            Error::Routing(_) => "E_ROUTING",
            Error::Contract(_) => "E_CONTRACT",
            Error::Corruption { .. } => "E_CORRUPT",
            Error::Numerical(_) => "E_NUMERIC",
            Error::Incompatible(_) => "E_INCOMPATIBLE",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
pub(crate) use {config_err, data_err, shape_err};
