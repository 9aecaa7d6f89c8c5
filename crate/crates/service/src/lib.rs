//! Campaign building, durable task assignment and the annotation HTTP API.

pub mod build;
pub mod config;
pub mod http;
pub mod provider;
pub mod store;

use std::path::Path;

use esa_core::checks::CheckError;
use esa_core::export::ExportError;
use thiserror::Error;

pub use build::{build_campaign, Campaign, InputSegment, TaskBatch};
pub use config::CampaignConfig;
pub use store::{CampaignService, Clock, ManualClock, SystemClock};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{origin}:{line}: {message}")]
    Input {
        origin: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error("unknown annotator {0}")]
    UnknownAnnotator(String),
    #[error("unknown segment {0}")]
    UnknownSegment(String),
    #[error("segment {key} is not claimed by {annotator}")]
    NotClaimed { annotator: String, key: String },
    #[error("invalid submission: {}", .0.join("; "))]
    InvalidSubmission(Vec<String>),
    #[error("all {0} batches are assigned")]
    NoBatchAvailable(usize),
    #[error("event log {path} is corrupt at line {line}: {message}")]
    CorruptLog {
        path: String,
        line: usize,
        message: String,
    },
}

impl ServiceError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}
