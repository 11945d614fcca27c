use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    CacheOutcome, Completion, LlmProvider, PromptCache, ProviderError, ProviderRequest, Rates,
    UsageLedger,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 250,
            max_delay_ms: 4_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> RetryPolicy {
        RetryPolicy {
            base_delay_ms: 0,
            max_delay_ms: 0,
            ..RetryPolicy::default()
        }
    }

    /// Delay before retry number `retry` (1-based): base · 2^(retry-1), capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64 << (retry.saturating_sub(1)).min(20);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

struct Permits {
    available: Mutex<usize>,
    released: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut available = self.available.lock().expect("permit lock poisoned");
        while *available == 0 {
            available = self.released.wait(available).expect("permit lock poisoned");
        }
        *available -= 1;
        PermitGuard { permits: self }
    }
}

struct PermitGuard<'a> {
    permits: &'a Permits,
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.permits.available.lock().expect("permit lock poisoned") += 1;
        self.permits.released.notify_one();
    }
}

/// Every provider call goes through here: cache bookkeeping, retries with
/// exponential backoff on transient errors, and ledger updates.
pub struct Gateway {
    provider: Arc<dyn LlmProvider>,
    cache: PromptCache,
    ledger: Mutex<UsageLedger>,
    retry: RetryPolicy,
    permits: Option<Permits>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn LlmProvider>, rates: Rates) -> Gateway {
        Gateway {
            provider,
            cache: PromptCache::new(),
            ledger: Mutex::new(UsageLedger::new(rates)),
            retry: RetryPolicy::default(),
            permits: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Gateway {
        self.retry = retry;
        self
    }

    pub fn with_cache(mut self, cache: PromptCache) -> Gateway {
        self.cache = cache;
        self
    }

    /// Bound the number of in-flight provider calls.
    pub fn with_max_in_flight(mut self, limit: usize) -> Gateway {
        self.permits = Some(Permits {
            available: Mutex::new(limit.max(1)),
            released: Condvar::new(),
        });
        self
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    pub fn cache(&self) -> &PromptCache {
        &self.cache
    }

    pub fn ledger(&self) -> UsageLedger {
        self.ledger.lock().expect("ledger lock poisoned").clone()
    }

    pub fn add_wall_time(&self, scope: &str, elapsed: Duration) {
        self.ledger
            .lock()
            .expect("ledger lock poisoned")
            .add_wall_time(scope, elapsed);
    }

    /// Send one request, charging it to `scope` (normally a policy id).
    pub fn complete(
        &self,
        scope: &str,
        request: &ProviderRequest,
    ) -> Result<Completion, ProviderError> {
        if request.is_empty() {
            return Err(ProviderError::EmptyRequest);
        }
        let cache_hit = !request.cached_context.is_empty()
            && self.cache.observe(&request.cached_context) == CacheOutcome::Hit;

        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.permits.as_ref().map(Permits::acquire);
                self.provider.complete(request)
            };
            match result {
                Ok(completion) => {
                    self.ledger
                        .lock()
                        .expect("ledger lock poisoned")
                        .record_call(
                            scope,
                            completion.input_tokens,
                            completion.output_tokens,
                            cache_hit,
                        );
                    return Ok(completion);
                }
                Err(err) => {
                    self.ledger
                        .lock()
                        .expect("ledger lock poisoned")
                        .record_failure(scope);
                    if !err.is_transient() || attempt >= self.retry.max_attempts {
                        tracing::warn!(scope, attempt, %err, "provider call failed");
                        return Err(err);
                    }
                    let delay = self.retry.backoff(attempt);
                    tracing::debug!(scope, attempt, ?delay, %err, "retrying provider call");
                    thread::sleep(delay);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ExpectedFormat;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures_left: AtomicU32,
        calls: AtomicU32,
        error: ProviderError,
    }

    impl LlmProvider for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }

        fn complete(&self, _request: &ProviderRequest) -> Result<Completion, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self
                .failures_left
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err(self.error.clone());
            }
            Ok(Completion {
                text: "ok".into(),
                input_tokens: 7,
                output_tokens: 1,
            })
        }
    }

    fn request(context: &str) -> ProviderRequest {
        ProviderRequest {
            cached_context: context.into(),
            task_prompt: "do it".into(),
            expected_format: ExpectedFormat::SummaryText,
        }
    }

    fn flaky(failures: u32, error: ProviderError) -> Arc<Flaky> {
        Arc::new(Flaky {
            failures_left: AtomicU32::new(failures),
            calls: AtomicU32::new(0),
            error,
        })
    }

    #[test]
    fn transient_errors_are_retried() {
        let provider = flaky(2, ProviderError::RateLimited);
        let gateway =
            Gateway::new(provider.clone(), Rates::default()).with_retry(RetryPolicy::no_delay());
        assert!(gateway.complete("p", &request("ctx")).is_ok());
        assert_eq!(provider.calls.load(Ordering::SeqCst), 3);
        let entry = gateway.ledger().entry("p").cloned().unwrap();
        assert_eq!(entry.request_count, 1);
        assert_eq!(entry.failed_calls, 2);
        assert_eq!(entry.input_tokens, 7);
    }

    #[test]
    fn outage_surfaces_after_three_attempts() {
        let provider = flaky(u32::MAX, ProviderError::Timeout);
        let gateway =
            Gateway::new(provider.clone(), Rates::default()).with_retry(RetryPolicy::no_delay());
        assert_eq!(
            gateway.complete("p", &request("ctx")),
            Err(ProviderError::Timeout)
        );
        assert_eq!(provider.calls.load(Ordering::SeqCst), 3);
        assert_eq!(gateway.ledger().entry("p").unwrap().request_count, 0);
    }

    #[test]
    fn non_transient_errors_are_not_retried() {
        let provider = flaky(u32::MAX, ProviderError::Unavailable("no key".into()));
        let gateway = Gateway::new(provider.clone(), Rates::default());
        assert!(gateway.complete("p", &request("ctx")).is_err());
        assert_eq!(provider.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cache_hits_are_recorded() {
        let gateway = Gateway::new(flaky(0, ProviderError::Timeout), Rates::default());
        gateway.complete("p", &request("shared")).unwrap();
        gateway.complete("p", &request("shared")).unwrap();
        gateway.complete("p", &request("different")).unwrap();
        let entry = gateway.ledger().entry("p").cloned().unwrap();
        assert_eq!(entry.request_count, 3);
        assert_eq!(entry.cache_hits, 1);
    }

    #[test]
    fn empty_requests_are_rejected() {
        let gateway = Gateway::new(flaky(0, ProviderError::Timeout), Rates::default());
        let empty = ProviderRequest {
            cached_context: String::new(),
            task_prompt: "  ".into(),
            expected_format: ExpectedFormat::SummaryText,
        };
        assert_eq!(
            gateway.complete("p", &empty),
            Err(ProviderError::EmptyRequest)
        );
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let policy = RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 100,
            max_delay_ms: 300,
        };
        assert_eq!(policy.backoff(1), Duration::from_millis(100));
        assert_eq!(policy.backoff(2), Duration::from_millis(200));
        assert_eq!(policy.backoff(3), Duration::from_millis(300));
    }
}
