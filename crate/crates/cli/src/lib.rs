//! Config-driven experiment runner behind the `tdlab` binary.
//!
//! A run reads a plain-text config (see [`config`]), builds or loads an
//! instance, dispatches to the core library and writes `instance.json`,
//! `results.csv` and `manifest.json` into the output directory.

pub mod config;
pub mod experiment;
pub mod plot;

pub use config::{parse_config, parse_config_file, ExperimentConfig, ExperimentKind};
pub use experiment::{check_instance, run_experiment, RunOptions, RunSummary};
pub use plot::{emit_plots, PlotKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] tdlab_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for config problems, 3 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
            CliError::Core(e) => e.category(),
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }
}
