//! Command-line front end: experiment configs, run-directory management, and
//! the subcommand implementations. The binary in `main.rs` is a thin clap
//! dispatcher over [`commands`]; everything testable lives here.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod commands;
pub mod experiment;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or inconsistent inputs — the message is the full story.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] nowcast_core::config::ConfigError),
    #[error(transparent)]
    Data(#[from] nowcast_core::data::DataError),
    #[error(transparent)]
    Model(#[from] nowcast_core::model::ModelError),
    #[error(transparent)]
    Train(#[from] nowcast_core::train::TrainError),
    #[error(transparent)]
    Tensor(#[from] nowcast_core::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<V> = std::result::Result<V, CliError>;

/// Tracks every file a command creates so a failed run can be cleaned up
/// instead of leaving a half-written run directory behind.
#[derive(Debug, Default)]
pub struct Outputs {
    created: Vec<PathBuf>,
}

impl Outputs {
    /// Record a path that a library routine is about to create.
    pub fn note(&mut self, path: &Path) {
        self.created.push(path.to_path_buf());
    }

    /// Write bytes to `path` and record it.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        self.note(path);
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Remove everything recorded; failures here are deliberately ignored
    /// (the file may never have been created).
    pub fn discard(&self) {
        for path in &self.created {
            let _ = std::fs::remove_file(path);
        }
    }
}
