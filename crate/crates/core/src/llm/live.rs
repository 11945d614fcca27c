//! HTTP provider speaking the Anthropic Messages API.
//!
//! The cached context goes into the system prompt with an ephemeral cache
//! marker; the task prompt is the single user message. Token counts are taken
//! from the response's `usage` block.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Completion, LlmProvider, ProviderError, ProviderRequest};

pub const DEFAULT_ENDPOINT: &str = "https://api.anthropic.com";
pub const API_VERSION: &str = "2023-06-01";

#[derive(Debug, Clone)]
pub struct LiveProvider {
    endpoint: String,
    model: String,
    api_key: String,
    max_tokens: u32,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct MessagesResponse {
    content: Vec<ContentBlock>,
    usage: Usage,
}

#[derive(Deserialize)]
struct ContentBlock {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    text: String,
}

#[derive(Deserialize)]
struct Usage {
    input_tokens: u64,
    output_tokens: u64,
    #[serde(default)]
    cache_creation_input_tokens: u64,
    #[serde(default)]
    cache_read_input_tokens: u64,
}

impl LiveProvider {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: impl Into<String>,
        timeout: Duration,
    ) -> LiveProvider {
        LiveProvider {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: api_key.into(),
            max_tokens: 4096,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    /// Read the API key from `env_var`; a missing key is `Unavailable`.
    pub fn from_env(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        env_var: &str,
        timeout: Duration,
    ) -> Result<LiveProvider, ProviderError> {
        let key = std::env::var(env_var)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                ProviderError::Unavailable(format!("credential variable `{env_var}` is not set"))
            })?;
        Ok(LiveProvider::new(endpoint, model, key, timeout))
    }

    fn body(&self, request: &ProviderRequest) -> serde_json::Value {
        let mut system = Vec::new();
        if !request.cached_context.is_empty() {
            system.push(json!({
                "type": "text",
                "text": request.cached_context,
                "cache_control": {"type": "ephemeral"},
            }));
        }
        json!({
            "model": self.model,
            "max_tokens": self.max_tokens,
            "temperature": 0,
            "system": system,
            "messages": [{"role": "user", "content": request.task_prompt}],
        })
    }
}

impl LlmProvider for LiveProvider {
    fn name(&self) -> &str {
        "live"
    }

    fn complete(&self, request: &ProviderRequest) -> Result<Completion, ProviderError> {
        let url = format!("{}/v1/messages", self.endpoint);
        let response = self
            .agent
            .post(&url)
            .set("x-api-key", &self.api_key)
            .set("anthropic-version", API_VERSION)
            .set("content-type", "application/json")
            .send_json(self.body(request));
        let response = match response {
            Ok(response) => response,
            Err(ureq::Error::Status(429, _)) => return Err(ProviderError::RateLimited),
            Err(ureq::Error::Status(code @ (408 | 504), _)) => {
                tracing::debug!(code, "provider timeout status");
                return Err(ProviderError::Timeout);
            }
            Err(ureq::Error::Status(code @ (500..=599), _)) => {
                return Err(ProviderError::Transport(format!("server status {code}")))
            }
            Err(ureq::Error::Status(code, response)) => {
                let body = response.into_string().unwrap_or_default();
                return Err(ProviderError::Unavailable(format!("status {code}: {body}")));
            }
            Err(ureq::Error::Transport(transport)) => {
                let message = transport.to_string();
                if message.to_lowercase().contains("timed out") {
                    return Err(ProviderError::Timeout);
                }
                return Err(ProviderError::Transport(message));
            }
        };
        let parsed: MessagesResponse = response
            .into_json()
            .map_err(|e| ProviderError::MalformedResponse(format!("response body: {e}")))?;
        let text = parsed
            .content
            .iter()
            .filter(|block| block.kind == "text")
            .map(|block| block.text.as_str())
            .collect::<Vec<_>>()
            .join("");
        // Cached reads are billed here at the full input rate.
        let usage = parsed.usage;
        Ok(Completion {
            text,
            input_tokens: usage.input_tokens
                + usage.cache_creation_input_tokens
                + usage.cache_read_input_tokens,
            output_tokens: usage.output_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ExpectedFormat;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// One-shot HTTP server returning `status` and `body`; yields the request body.
    fn serve_once(status: u16, body: &'static str) -> (String, thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
            }
            let mut request_body = vec![0u8; content_length];
            reader.read_exact(&mut request_body).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            String::from_utf8(request_body).unwrap()
        });
        (addr, handle)
    }

    fn request() -> ProviderRequest {
        ProviderRequest {
            cached_context: "card and policy".into(),
            task_prompt: "score it".into(),
            expected_format: ExpectedFormat::ScoreTable,
        }
    }

    #[test]
    fn parses_messages_response() {
        let (addr, handle) = serve_once(
            200,
            r#"{"content":[{"type":"text","text":"| 1 | {\"score\": 0, \"description\": null} |"}],"usage":{"input_tokens":10,"output_tokens":4,"cache_read_input_tokens":90}}"#,
        );
        let provider = LiveProvider::new(addr, "test-model", "k", Duration::from_secs(5));
        let completion = provider.complete(&request()).unwrap();
        assert_eq!(completion.input_tokens, 100);
        assert_eq!(completion.output_tokens, 4);
        assert!(completion.text.contains("score"));
        let sent: serde_json::Value = serde_json::from_str(&handle.join().unwrap()).unwrap();
        assert_eq!(sent["system"][0]["cache_control"]["type"], "ephemeral");
        assert_eq!(sent["messages"][0]["content"], "score it");
    }

    #[test]
    fn maps_rate_limit_status() {
        let (addr, handle) = serve_once(429, "{}");
        let provider = LiveProvider::new(addr, "m", "k", Duration::from_secs(5));
        assert_eq!(
            provider.complete(&request()),
            Err(ProviderError::RateLimited)
        );
        handle.join().unwrap();
    }

    #[test]
    fn missing_credentials_are_unavailable() {
        let err = LiveProvider::from_env(
            DEFAULT_ENDPOINT,
            "m",
            "COMPLYSCAN_TEST_UNSET_KEY_VAR",
            Duration::from_secs(1),
        )
        .unwrap_err();
        assert!(matches!(err, ProviderError::Unavailable(_)));
    }
}
