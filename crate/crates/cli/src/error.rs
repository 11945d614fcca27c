use std::fmt;
use std::path::{Path, PathBuf};

use complyscan_core::config::ConfigError;
use complyscan_core::llm::ProviderError;
use complyscan_core::pipeline::PipelineError;
use serde::Serialize;

/// Failure of a CLI verb, printed to stderr as one JSON line.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> CliError {
        CliError {
            kind,
            path: None,
            message: message.into(),
        }
    }

    pub fn file(path: &Path, cause: impl fmt::Display) -> CliError {
        CliError {
            kind: "file",
            path: Some(path.to_path_buf()),
            message: cause.to_string(),
        }
    }

    pub fn input(path: &Path, cause: impl fmt::Display) -> CliError {
        CliError {
            kind: "input",
            path: Some(path.to_path_buf()),
            message: cause.to_string(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.path {
            Some(p) => write!(f, "{}: {}: {}", self.kind, p.display(), self.message),
            None => write!(f, "{}: {}", self.kind, self.message),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        match &e {
            ConfigError::Io { path, .. } | ConfigError::Invalid { path, .. } => CliError {
                kind: "config",
                path: Some(path.clone()),
                message: e.to_string(),
            },
            ConfigError::Provider(p) => p.clone().into(),
        }
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> CliError {
        CliError::new("provider", e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> CliError {
        match e {
            PipelineError::Io { path, source } => CliError::file(&path, source),
            other => CliError::new("pipeline", other.to_string()),
        }
    }
}
