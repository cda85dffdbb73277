//! OpenAI-compatible HTTP backend.
//!
//! Generation goes through a chat-completions endpoint. Scoring needs echoed
//! per-token log-probabilities, which chat endpoints do not expose, so it goes
//! through a legacy completions endpoint instead; a backend without one
//! reports a capability error. Every request carries the full set of sampling
//! fields so the server never fills in silent defaults.

use super::{Backend, BackendError, GenerationParams};
use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;
use std::time::Duration;

/// Exponential backoff: retry only on 429, 5xx, and transport timeouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_backoff_ms: 250 }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_backoff_ms.saturating_mul(1u64 << attempt.min(16)))
    }
}

fn retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    model: String,
    chat_url: String,
    completions_url: Option<String>,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl HttpBackend {
    /// `endpoint` is the API base (e.g. `http://host:8000/v1`); the chat and
    /// completions paths are appended. `api_key_env` names an environment
    /// variable holding the credential; when set but absent from the
    /// environment, construction fails rather than sending anonymous traffic.
    pub fn new(
        endpoint: &str,
        model: &str,
        api_key_env: Option<&str>,
        scoring_endpoint: Option<&str>,
        retry: RetryPolicy,
    ) -> Result<Self, BackendError> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingCredential(var.to_string()))?),
            None => None,
        };
        let base = endpoint.trim_end_matches('/');
        Ok(HttpBackend {
            client: reqwest::Client::new(),
            model: model.to_string(),
            chat_url: format!("{base}/chat/completions"),
            completions_url: scoring_endpoint.map(|s| s.trim_end_matches('/').to_string()),
            api_key,
            retry,
        })
    }

    async fn post_with_retry(&self, url: &str, body: &serde_json::Value) -> Result<(serde_json::Value, u32), BackendError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let mut request = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send().await {
                Ok(response) => {
                    let status = response.status().as_u16();
                    if (200..300).contains(&status) {
                        let value = response
                            .json::<serde_json::Value>()
                            .await
                            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
                        return Ok((value, attempts));
                    }
                    let body_text = response.text().await.unwrap_or_default();
                    if !retryable_status(status) || attempts > self.retry.max_retries {
                        return Err(BackendError::Status { status, attempts, body: body_text });
                    }
                }
                Err(e) => {
                    if !(e.is_timeout() || e.is_connect()) || attempts > self.retry.max_retries {
                        return Err(BackendError::Transport { attempts, message: e.to_string() });
                    }
                }
            }
            tokio::time::sleep(self.retry.backoff(attempts - 1)).await;
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    logprobs: Option<EchoedLogprobs>,
}

#[derive(Deserialize)]
struct EchoedLogprobs {
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

#[async_trait]
impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.model
    }

    async fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        if params.best_of > 1 {
            log::warn!("best_of={} requested; only the first choice is consumed", params.best_of);
        }
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "repetition_penalty": params.repetition_penalty,
            "best_of": params.best_of,
        });
        let (value, _attempts) = self.post_with_retry(&self.chat_url, &body).await?;
        let parsed: ChatResponse =
            serde_json::from_value(value).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::MalformedResponse("empty choices array".to_string()))
    }

    async fn score_sequence_logprob(&self, context: &str, continuation: &str) -> Result<f64, BackendError> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let url = self
            .completions_url
            .as_deref()
            .ok_or_else(|| BackendError::ScoringUnsupported { name: self.model.clone() })?;
        let body = json!({
            "model": self.model,
            "prompt": format!("{context}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let (value, _attempts) = self.post_with_retry(url, &body).await?;
        let parsed: CompletionResponse =
            serde_json::from_value(value).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let logprobs = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| BackendError::MalformedResponse("missing logprobs echo".to_string()))?;
        if logprobs.token_logprobs.len() != logprobs.text_offset.len() {
            return Err(BackendError::MalformedResponse("token_logprobs/text_offset length mismatch".to_string()));
        }

        let boundary = context.len();
        // The continuation must start exactly at a token boundary; otherwise a
        // token straddles the context/continuation split and its probability
        // cannot be attributed.
        let start = match logprobs.text_offset.iter().position(|&off| off >= boundary) {
            Some(i) if logprobs.text_offset[i] == boundary => i,
            _ => return Err(BackendError::TokenBoundary { offset: boundary }),
        };
        let mut total = 0.0;
        for logprob in &logprobs.token_logprobs[start..] {
            match logprob {
                Some(lp) => total += lp,
                None => return Err(BackendError::MalformedResponse("null logprob inside continuation".to_string())),
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_grows_exponentially() {
        let retry = RetryPolicy { max_retries: 3, base_backoff_ms: 100 };
        assert_eq!(retry.backoff(0), Duration::from_millis(100));
        assert_eq!(retry.backoff(1), Duration::from_millis(200));
        assert_eq!(retry.backoff(2), Duration::from_millis(400));
    }

    #[test]
    fn retryable_statuses() {
        assert!(retryable_status(429));
        assert!(retryable_status(500));
        assert!(retryable_status(503));
        assert!(!retryable_status(400));
        assert!(!retryable_status(401));
        assert!(!retryable_status(404));
    }

    #[test]
    fn missing_credential_fails_construction() {
        let err = HttpBackend::new("http://localhost:1/v1", "m", Some("AGDE_TEST_UNSET_KEY"), None, RetryPolicy::default())
            .unwrap_err();
        assert!(matches!(err, BackendError::MissingCredential(_)));
    }

    #[tokio::test]
    async fn scoring_without_completions_endpoint_is_capability_error() {
        let backend = HttpBackend::new("http://localhost:1/v1", "m", None, None, RetryPolicy::default()).unwrap();
        let err = backend.score_sequence_logprob("ctx", "cont").await.unwrap_err();
        assert!(matches!(err, BackendError::ScoringUnsupported { .. }));
    }
}
