use std::path::Path;

use thiserror::Error;

use spatialvqa_core::client::ClientError;
use spatialvqa_core::cot::CotError;
use spatialvqa_core::filtering::FilterError;
use spatialvqa_core::reward::RewardError;
use spatialvqa_core::scene::IngestError;
use spatialvqa_core::scoring::ResponseFileError;
use spatialvqa_core::taskgen::{ManifestError, TaskGenError};

/// Errors surfaced by a subcommand, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration. Exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Unreadable, malformed or inconsistent input data. Exit code 2.
    #[error("{0}")]
    Data(String),
    /// A model endpoint failed. Exit code 3.
    #[error("{0}")]
    Remote(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Remote(_) => 3,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Data(format!("{}: {e}", path.display()))
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TaskGenError> for CliError {
    fn from(e: TaskGenError) -> Self {
        match e {
            TaskGenError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ResponseFileError> for CliError {
    fn from(e: ResponseFileError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        Self::Remote(e.to_string())
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Config(_) => Self::Usage(e.to_string()),
            FilterError::Captioner { .. } => Self::Remote(e.to_string()),
        }
    }
}

impl From<RewardError> for CliError {
    fn from(e: RewardError) -> Self {
        match e {
            RewardError::Config(_) | RewardError::NoVerifier => Self::Usage(e.to_string()),
            RewardError::Verifier(_) => Self::Remote(e.to_string()),
            RewardError::EmptyGroup => Self::Data(e.to_string()),
        }
    }
}

impl From<CotError> for CliError {
    fn from(e: CotError) -> Self {
        match e {
            CotError::Client(_) => Self::Remote(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}
