use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error categories shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("alignment error: record {record_id}: {reason}")]
    Alignment { record_id: u64, reason: String },
    #[error("optimization error: {0}")]
    Optimization(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("merge error: {0}")]
    Merge(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("application error: {0}")]
    Application(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("missing artifact {path} (run `{stage}` first)")]
    MissingArtifact { path: PathBuf, stage: String },
    #[error("artifact {path} was produced by config {found}, current config is {expected} (pass --force to override)")]
    ConfigMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short category label used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::ConfigMismatch { .. } => "config",
            Error::Input(_) | Error::Encoding(_) | Error::Alignment { .. } => "input",
            Error::Contract(_) => "contract",
            Error::Generation(_) => "generation",
            Error::Training(_) | Error::Optimization(_) | Error::Solver(_) => "numeric",
            Error::Merge(_) | Error::Application(_) | Error::Protocol(_) => "protocol",
            Error::InsufficientData(_) => "data",
            Error::Format { .. } | Error::MissingArtifact { .. } | Error::Io(_) | Error::Json(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "input" => 3,
            "io" => 4,
            "numeric" => 5,
            "protocol" => 6,
            "data" => 7,
            _ => 1,
        }
    }
}
