//! TOML configuration for providers, rates and pipeline knobs.
//!
//! Credentials never appear in the file; `credentials_env` names the
//! environment variable that holds the key.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::AggregationConfig;
use crate::engine::EngineConfig;
use crate::llm::live::{LiveProvider, DEFAULT_ENDPOINT};
use crate::llm::mock::MockProvider;
use crate::llm::{Gateway, LlmProvider, ProviderError, Rates, RetryPolicy};
use crate::relevancy::Thresholds;

pub const DEFAULT_MODEL: &str = "claude-sonnet-4-20250514";
pub const DEFAULT_CREDENTIALS_ENV: &str = "ANTHROPIC_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    Live,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<ProviderKind, String> {
        match s {
            "mock" => Ok(ProviderKind::Mock),
            "live" => Ok(ProviderKind::Live),
            other => Err(format!(
                "unknown provider `{other}` (expected mock or live)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: String,
    pub model: String,
    pub credentials_env: String,
    pub timeout_secs: u64,
    /// Upper bound on provider calls in flight across the whole process.
    pub parallelism: usize,
}

impl Default for ProviderConfig {
    fn default() -> ProviderConfig {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint: DEFAULT_ENDPOINT.into(),
            model: DEFAULT_MODEL.into(),
            credentials_env: DEFAULT_CREDENTIALS_ENV.into(),
            timeout_secs: 120,
            parallelism: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub max_concurrent_runs: usize,
}

impl Default for ServiceConfig {
    fn default() -> ServiceConfig {
        ServiceConfig {
            max_concurrent_runs: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub provider: ProviderConfig,
    pub rates: Rates,
    pub retry: RetryPolicy,
    pub engine: EngineConfig,
    pub relevancy: Thresholds,
    pub aggregation: AggregationConfig,
    pub service: ServiceConfig,
}

impl AppConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<AppConfig, ConfigError> {
        let config: AppConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        config.validate().map_err(|reason| ConfigError::Invalid {
            path: path.to_path_buf(),
            reason,
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<AppConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        AppConfig::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), String> {
        let e = &self.engine;
        if e.max_batch == 0 || e.target_batch == 0 || e.batch_parallelism == 0 {
            return Err("engine batch sizes and parallelism must be positive".into());
        }
        if e.target_batch > e.max_batch {
            return Err("engine.target_batch exceeds engine.max_batch".into());
        }
        if self.retry.max_attempts == 0 {
            return Err("retry.max_attempts must be at least 1".into());
        }
        if self.provider.parallelism == 0 || self.service.max_concurrent_runs == 0 {
            return Err("parallelism bounds must be positive".into());
        }
        if self.aggregation.issue_threshold > 5 {
            return Err("aggregation.issue_threshold must be within 0..=5".into());
        }
        if self.rates.input_per_million.is_sign_negative()
            || self.rates.output_per_million.is_sign_negative()
        {
            return Err("rates must not be negative".into());
        }
        Ok(())
    }

    /// Provider for `kind`, overriding the configured kind.
    pub fn provider_for(&self, kind: ProviderKind) -> Result<Arc<dyn LlmProvider>, ProviderError> {
        Ok(match kind {
            ProviderKind::Mock => Arc::new(MockProvider::new()),
            ProviderKind::Live => Arc::new(LiveProvider::from_env(
                self.provider.endpoint.clone(),
                self.provider.model.clone(),
                &self.provider.credentials_env,
                Duration::from_secs(self.provider.timeout_secs),
            )?),
        })
    }

    pub fn gateway_for(&self, kind: ProviderKind) -> Result<Gateway, ProviderError> {
        let retry = match kind {
            ProviderKind::Mock => RetryPolicy::no_delay(),
            ProviderKind::Live => self.retry,
        };
        Ok(Gateway::new(self.provider_for(kind)?, self.rates)
            .with_retry(retry)
            .with_max_in_flight(self.provider.parallelism))
    }
}
