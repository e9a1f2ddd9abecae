use std::path::Path;

use thiserror::Error;
use vitprune_core::container::ContainerError;
use vitprune_core::model::ModelError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    pub fn invalid(msg: impl std::fmt::Display) -> Self {
        CliError::Validation(msg.to_string())
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn container(path: &Path, e: ContainerError) -> Self {
        match e {
            ContainerError::Io(e) => Self::io(path, e),
            e => Self::invalid(format!("{}: {e} (code {})", path.display(), e.code())),
        }
    }

    pub fn model(path: &Path, e: ModelError) -> Self {
        match e {
            ModelError::Container(e) => Self::container(path, e),
            e => Self::invalid(format!("{}: {e}", path.display())),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
