//! Command-line front end: run configuration, training, sliding-window
//! inference and the subcommand bodies.

pub mod commands;
pub mod infer;
pub mod optim;
pub mod run_config;
pub mod train;
pub mod windows;

use radarformer_core::error::{Category, CoreError};

pub use run_config::{RunConfig, ScheduleKind};

macro_rules! config_err {
    ($($arg:tt)*) => { radarformer_core::CoreError::Config(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { radarformer_core::CoreError::Data(format!($($arg)*)) };
}
pub(crate) use {config_err, data_err};

pub fn exit_code(category: Category) -> i32 {
    match category {
        Category::Config => 2,
        Category::Data => 3,
        Category::Runtime => 4,
    }
}

/// Single-line error report: `error category=<c> code=<n>: <message>`.
pub fn error_line(err: &CoreError) -> String {
    let c = err.category();
    let msg = err.to_string().replace(['\n', '\r'], " ");
    format!("error category={} code={}: {msg}", c.as_str(), exit_code(c))
}
