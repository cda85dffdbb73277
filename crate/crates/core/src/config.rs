//! Pipeline configuration: backend roles, sampling parameters, protocol
//! limits, and the single root seed everything derives from.
//!
//! Stage-level randomness never consumes the root seed directly. Each
//! consumer derives its own seed as the first eight little-endian bytes of
//! `SHA-256(root_seed_le || label)`, where `label` is a stable string such as
//! `"backend.teacher"` or `"stage1.dpo_sample"`. Rerunning any stage therefore
//! reproduces its stream regardless of which other stages ran before it.

use crate::backend::{Backend, GenerationParams, HttpBackend, MockBackend, RetryPolicy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

/// Derive a per-consumer seed from the root seed and a stable label.
pub fn derive_seed(root_seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has at least 8 bytes"))
}

/// The five backend roles a pipeline run may need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Teacher,
    Assistant,
    PolicyScorer,
    ReferenceScorer,
    Judge,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Assistant => "assistant",
            Role::PolicyScorer => "policy_scorer",
            Role::ReferenceScorer => "reference_scorer",
            Role::Judge => "judge",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Declarative description of one backend, as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    HttpChat {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        /// Completions-style endpoint with echoed logprobs; required for
        /// sequence scoring.
        #[serde(default)]
        scoring_endpoint: Option<String>,
        #[serde(default)]
        retry: RetryPolicy,
    },
    DeterministicMock {
        /// Derived from the root seed and role when omitted.
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        jitter_ms: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendRoles {
    #[serde(default)]
    pub teacher: Option<BackendSpec>,
    #[serde(default)]
    pub assistant: Option<BackendSpec>,
    #[serde(default)]
    pub policy_scorer: Option<BackendSpec>,
    #[serde(default)]
    pub reference_scorer: Option<BackendSpec>,
    #[serde(default)]
    pub judge: Option<BackendSpec>,
}

impl BackendRoles {
    pub fn get(&self, role: Role) -> Option<&BackendSpec> {
        match role {
            Role::Teacher => self.teacher.as_ref(),
            Role::Assistant => self.assistant.as_ref(),
            Role::PolicyScorer => self.policy_scorer.as_ref(),
            Role::ReferenceScorer => self.reference_scorer.as_ref(),
            Role::Judge => self.judge.as_ref(),
        }
    }
}

/// Policy for Stage-2 records whose aggregated decision contradicts the
/// Stage-1 label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictPolicy {
    /// Drop the record; exported labels never disagree with their feedback.
    #[default]
    Drop,
    /// Keep the Stage-1 label and flag the record as conflicted.
    KeepStage1,
}

fn default_concurrency() -> usize {
    4
}

fn default_max_attempts() -> u32 {
    10
}

fn default_margin_threshold() -> f64 {
    5.0
}

fn default_malformed_tolerance() -> f64 {
    0.1
}

fn default_bias_flag_threshold() -> f64 {
    0.1
}

fn default_bootstrap_resamples() -> usize {
    1000
}

/// Everything a run needs beyond its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Bounded-retry budget for decision extraction.
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    /// Default margin threshold T; subcommands may override per run.
    #[serde(default = "default_margin_threshold")]
    pub margin_threshold: f64,
    /// Fraction of malformed lines tolerated before ingestion fails hard.
    #[serde(default = "default_malformed_tolerance")]
    pub malformed_tolerance: f64,
    #[serde(default)]
    pub conflict_policy: ConflictPolicy,
    /// A bias report is flagged when its delta exceeds this.
    #[serde(default = "default_bias_flag_threshold")]
    pub bias_flag_threshold: f64,
    #[serde(default = "default_bootstrap_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default)]
    pub sampling: GenerationParams,
    #[serde(default)]
    pub backends: BackendRoles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            concurrency: default_concurrency(),
            max_attempts: default_max_attempts(),
            margin_threshold: default_margin_threshold(),
            malformed_tolerance: default_malformed_tolerance(),
            conflict_policy: ConflictPolicy::default(),
            bias_flag_threshold: default_bias_flag_threshold(),
            bootstrap_resamples: default_bootstrap_resamples(),
            sampling: GenerationParams::default(),
            backends: BackendRoles::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("backend for role {0} failed to initialize: {1}")]
    Backend(Role, crate::backend::BackendError),
}

/// A single schema violation; violations are reported, not thrown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigViolation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.display().to_string(), message: e.to_string() })
    }

    /// Check invariants plus backend-role completeness for the requested
    /// stage. Returns every violation found; ok iff empty.
    pub fn validate(&self, required_roles: &[Role]) -> Vec<ConfigViolation> {
        let mut violations = Vec::new();
        let mut push = |field: &str, message: String| {
            violations.push(ConfigViolation { field: field.to_string(), message });
        };
        if self.concurrency < 1 {
            push("concurrency", "must be >= 1".to_string());
        }
        if self.max_attempts < 1 {
            push("max_attempts", "must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.malformed_tolerance) {
            push("malformed_tolerance", "must be in [0, 1]".to_string());
        }
        if let Err(message) = self.sampling.check() {
            push("sampling", message);
        }
        for role in required_roles {
            match self.backends.get(*role) {
                None => push(&format!("backends.{role}"), format!("role {role} is required but not configured")),
                Some(BackendSpec::HttpChat { endpoint, model, .. }) => {
                    if endpoint.is_empty() {
                        push(&format!("backends.{role}.endpoint"), "must be non-empty".to_string());
                    }
                    if model.is_empty() {
                        push(&format!("backends.{role}.model"), "must be non-empty".to_string());
                    }
                }
                Some(BackendSpec::DeterministicMock { .. }) => {}
            }
        }
        violations
    }

    /// Instantiate the backend for a role. Mock seeds default to
    /// `derive_seed(root, "backend.<role>")`.
    pub fn build_backend(&self, role: Role) -> Result<Arc<dyn Backend>, ConfigError> {
        let spec = self
            .backends
            .get(role)
            .ok_or_else(|| ConfigError::Invalid(format!("role {role} is required but not configured")))?;
        match spec {
            BackendSpec::DeterministicMock { seed, jitter_ms } => {
                let seed = seed.unwrap_or_else(|| derive_seed(self.seed, &format!("backend.{role}")));
                Ok(Arc::new(MockBackend::new(seed).with_jitter(*jitter_ms)))
            }
            BackendSpec::HttpChat { endpoint, model, api_key_env, scoring_endpoint, retry } => {
                let backend =
                    HttpBackend::new(endpoint, model, api_key_env.as_deref(), scoring_endpoint.as_deref(), *retry)
                        .map_err(|e| ConfigError::Backend(role, e))?;
                Ok(Arc::new(backend))
            }
        }
    }
}
