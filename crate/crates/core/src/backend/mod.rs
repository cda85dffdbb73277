//! Uniform interface to text generation and log-probability scoring.
//!
//! All LLM traffic flows through the [`Backend`] trait. Two implementations
//! ship: [`HttpBackend`] speaks the OpenAI-compatible wire format, and
//! [`MockBackend`] is a pure function of its seed and inputs for offline
//! deterministic runs. [`run_batch`] is the single concurrent entry point;
//! everything else is a plain async call.

mod http;
mod mock;

pub use http::{HttpBackend, RetryPolicy};
pub use mock::MockBackend;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use std::future::Future;

/// Sampling parameters attached to every generation request.
///
/// Defaults are the evaluation settings used throughout the pipeline:
/// 1024 max tokens, temperature 1.0, top_p 0.9, repetition penalty 1.03,
/// best_of 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub best_of: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_tokens: 1024,
            temperature: 1.0,
            top_p: 0.9,
            repetition_penalty: 1.03,
            best_of: 1,
        }
    }
}

impl GenerationParams {
    pub fn check(&self) -> Result<(), String> {
        if self.max_tokens < 1 {
            return Err("max_tokens must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err("top_p must be in [0, 1]".to_string());
        }
        if self.temperature < 0.0 {
            return Err("temperature must be >= 0".to_string());
        }
        if self.best_of < 1 {
            return Err("best_of must be >= 1".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("http status {status} after {attempts} attempts: {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("backend {name} does not support log-probability scoring")]
    ScoringUnsupported { name: String },
    #[error("no token boundary at context offset {offset}; continuation cannot be isolated")]
    TokenBoundary { offset: usize },
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
}

/// A text-generation and sequence-scoring endpoint.
///
/// Implementations must be safe to share across concurrent workers; all
/// state is immutable after construction.
#[async_trait]
pub trait Backend: Send + Sync {
    /// Identifier recorded in annotations and logs.
    fn name(&self) -> &str;

    /// Generate a completion for `prompt` under `params`.
    async fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError>;

    /// Sum of token log-probabilities of `continuation` given `context`.
    ///
    /// The empty continuation scores exactly 0.0 (empty product).
    async fn score_sequence_logprob(&self, context: &str, continuation: &str) -> Result<f64, BackendError>;
}

/// Outcome of one request in a batch, keyed by the caller's request id.
#[derive(Debug)]
pub struct BatchOutcome<T, E> {
    pub id: String,
    pub result: Result<T, E>,
}

/// Run `worker` over every request with at most `limit` in flight.
///
/// Per-request failures are captured in their outcome, never fatal to the
/// batch. Results come back sorted by id, so output is independent of
/// completion order.
pub async fn run_batch<I, T, E, F, Fut>(requests: Vec<(String, I)>, limit: usize, worker: F) -> Vec<BatchOutcome<T, E>>
where
    F: Fn(String, I) -> Fut,
    Fut: Future<Output = Result<T, E>>,
{
    assert!(limit >= 1, "in-flight limit must be >= 1");
    let mut outcomes: Vec<BatchOutcome<T, E>> = stream::iter(requests.into_iter().map(|(id, input)| {
        let fut = worker(id.clone(), input);
        async move {
            BatchOutcome { id, result: fut.await }
        }
    }))
    .buffer_unordered(limit)
    .collect()
    .await;
    outcomes.sort_by(|a, b| a.id.cmp(&b.id));
    outcomes
}
