//! Stage-by-stage driver for the snapseg pipeline.

use std::path::PathBuf;

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::PipelineConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Pipeline(#[from] snapseg::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingArtifact(_) => 2,
            CliError::Config(_) => 3,
            CliError::Pipeline(_) => 1,
        }
    }
}
