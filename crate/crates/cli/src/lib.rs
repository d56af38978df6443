//! Orchestration of the lifting pipeline: configuration, stage subcommands,
//! run manifests and static plots.

pub mod app;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod render;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use app::run;
pub use config::PipelineConfig;
pub use manifest::RunManifest;
pub use pipeline::LiftMode;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mvlift_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing {what} at {} (produced by `mvlift {producer}`)", path.display())]
    MissingArtifact {
        what: String,
        path: PathBuf,
        producer: String,
    },
    #[error("prediction and ground-truth ids differ\n{0}")]
    IdMismatch(String),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
