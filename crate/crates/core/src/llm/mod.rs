//! Provider interface, prompt cache, retry policy and token/cost ledger.

mod cache;
mod gateway;
mod ledger;
pub mod live;
pub mod mock;
pub mod prompts;
mod score_table;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

pub use cache::{CacheOutcome, PromptCache};
pub use gateway::{Gateway, RetryPolicy};
pub use ledger::{compute_cost, display_cost, LedgerEntry, Rates, UsageLedger};
pub use score_table::{
    parse_score_table, render_score_table, request_scores, ScoreRow, PARSE_ATTEMPTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedFormat {
    ScoreTable,
    SummaryText,
    Grouping,
    /// `Article | Paragraph | Content` rows produced while structuring a policy.
    PolicyTable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderRequest {
    /// Long shared prefix (model card, policy table). Cache-keyed by digest.
    pub cached_context: String,
    pub task_prompt: String,
    pub expected_format: ExpectedFormat,
}

impl ProviderRequest {
    pub fn context_digest(&self) -> String {
        sha256_hex(self.cached_context.as_bytes())
    }

    pub fn is_empty(&self) -> bool {
        self.cached_context.trim().is_empty() && self.task_prompt.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("provider request timed out")]
    Timeout,
    #[error("provider rate limit hit")]
    RateLimited,
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("empty request")]
    EmptyRequest,
}

impl ProviderError {
    /// Transient errors are retried by the gateway with backoff.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            ProviderError::Timeout | ProviderError::RateLimited | ProviderError::Transport(_)
        )
    }
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &ProviderRequest) -> Result<Completion, ProviderError>;
}

/// Deterministic token estimate used where a provider reports none:
/// one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abc"), 1);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
        assert_eq!(estimate_tokens("§§§§§"), 2);
    }
}
