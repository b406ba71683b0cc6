use std::path::{Path, PathBuf};

use radarformer_tensor::TensorError;
use thiserror::Error;

/// Coarse error classes, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Runtime,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Runtime => "runtime",
        }
    }
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{file}: offset {offset}: {msg}")]
    Format { file: PathBuf, offset: u64, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CoreError {
    pub fn category(&self) -> Category {
        match self {
            CoreError::Config(_) | CoreError::Tensor(TensorError::Config(_)) => Category::Config,
            CoreError::Data(_) | CoreError::Format { .. } | CoreError::Io { .. } => Category::Data,
            CoreError::Tensor(_) => Category::Runtime,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CoreError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(file: &Path, offset: u64, msg: impl Into<String>) -> Self {
        CoreError::Format { file: file.to_path_buf(), offset, msg: msg.into() }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::CoreError::Config(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::CoreError::Data(format!($($arg)*)) };
}
pub(crate) use {config_err, data_err};
macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::CoreError::Tensor(radarformer_tensor::TensorError::Shape(format!($($arg)*)))
    };
}
pub(crate) use shape_err;
