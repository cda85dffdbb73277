//! Deterministic offline backend.
//!
//! Output is a pure function of `(seed, inputs)`: the same prompt under the
//! same seed always yields the same text, and scoring the same pair always
//! yields the same value. The generator inspects the prompt just enough to
//! produce output the downstream extractor can parse: judge prompts get a
//! concluding decision phrase in the convention the prompt asks for, critique
//! prompts get bullet-point flaw lists with no ranking.

use super::{Backend, BackendError, GenerationParams};
use async_trait::async_trait;
use std::time::Duration;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over the seed and all parts. Stable across platforms and builds.
fn fnv1a(seed: u64, parts: &[&str]) -> u64 {
    let mut hash = FNV_OFFSET;
    for byte in seed.to_le_bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    for part in parts {
        for byte in part.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(FNV_PRIME);
        }
        // separator so ("ab","c") != ("a","bc")
        hash ^= 0xff;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    name: String,
    seed: u64,
    /// Upper bound on simulated latency; 0 disables sleeping entirely.
    jitter_ms: u64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend { name: format!("mock-{seed}"), seed, jitter_ms: 0 }
    }

    /// Add hash-derived latency up to `jitter_ms` per call. The latency varies
    /// by input, which shuffles completion order in concurrent batches without
    /// touching the outputs themselves.
    pub fn with_jitter(mut self, jitter_ms: u64) -> Self {
        self.jitter_ms = jitter_ms;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    async fn simulate_latency(&self, hash: u64) {
        if self.jitter_ms > 0 {
            tokio::time::sleep(Duration::from_millis(hash % self.jitter_ms)).await;
        }
    }

    fn decision_for(&self, hash: u64, allow_tie: bool) -> &'static str {
        if allow_tie && hash % 7 == 0 {
            return "Tie";
        }
        if hash % 2 == 0 {
            "Response 1"
        } else {
            "Response 2"
        }
    }
}

const OPENERS: [&str; 4] = [
    "Both responses engage with the query, though with different emphasis.",
    "The two responses take clearly distinct approaches to the task.",
    "Each response covers the request, but their depth differs noticeably.",
    "The responses differ mainly in specificity and structure.",
];

const FACTORS: [&str; 4] = [
    "relevance to the stated question",
    "factual grounding of the claims",
    "completeness of the coverage",
    "clarity of the explanation",
];

#[async_trait]
impl Backend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    async fn complete(&self, prompt: &str, _params: &GenerationParams) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let hash = fnv1a(self.seed, &["complete", prompt]);
        self.simulate_latency(hash).await;

        let opener = OPENERS[(hash >> 8) as usize % OPENERS.len()];
        let factor_a = FACTORS[(hash >> 16) as usize % FACTORS.len()];
        let factor_b = FACTORS[(hash >> 24) as usize % FACTORS.len()];

        // Critique prompts explicitly forbid a ranking; honor that so the
        // extractor finds no decision marker in critiques.
        if prompt.contains("do not provide an overall preference") {
            return Ok(format!(
                "[Response 1]\n- weak on {factor_a}\n- leaves an edge case unaddressed\n\n\
                 [Response 2]\n- weak on {factor_b}\n- phrasing is verbose in places\n\n\
                 Neither response contains a disqualifying factual error beyond the points above."
            ));
        }

        if prompt.contains("[RESULT]") {
            let marker = if hash % 2 == 0 { "A" } else { "B" };
            return Ok(format!(
                "{opener} Judged strictly against the rubric, the deciding factor is {factor_a}. [RESULT] {marker}"
            ));
        }

        let allow_tie = prompt.contains("Response 1 / Response 2 / Tie");
        let marker = self.decision_for(hash, allow_tie);
        Ok(format!(
            "{opener} The key factors are {factor_a} and {factor_b}. \
             Weighing these, one response holds up better overall. \
             So, the final decision is {marker}"
        ))
    }

    async fn score_sequence_logprob(&self, context: &str, continuation: &str) -> Result<f64, BackendError> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let hash = fnv1a(self.seed, &["score", context, continuation]);
        self.simulate_latency(hash).await;
        // log-probability of a non-empty sequence under a proper model: < 0
        Ok(-(((hash % 1200) as f64) / 100.0) - 0.01)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates::{render_prompt, PromptTemplate, TemplateName};
    use std::collections::HashMap;

    #[tokio::test]
    async fn complete_is_deterministic_and_parseable() {
        let mock = MockBackend::new(1);
        let params = GenerationParams::default();
        let instance = crate::model::JudgeInstance::new("i", "q", "r0", "r1");
        let prompt = render_prompt(&PromptTemplate::get(TemplateName::AutojJudge), &instance, &HashMap::new()).unwrap();
        let a = mock.complete(&prompt, &params).await.unwrap();
        let b = mock.complete(&prompt, &params).await.unwrap();
        assert_eq!(a, b);
        assert!(
            a.ends_with("So, the final decision is Response 1") || a.ends_with("So, the final decision is Response 2"),
            "unexpected tail: {a}"
        );
    }

    #[tokio::test]
    async fn critique_prompts_get_no_decision_phrase() {
        let mock = MockBackend::new(3);
        let instance = crate::model::JudgeInstance::new("i", "q", "r0", "r1");
        let prompt = render_prompt(&PromptTemplate::get(TemplateName::Critique), &instance, &HashMap::new()).unwrap();
        let out = mock.complete(&prompt, &GenerationParams::default()).await.unwrap();
        assert!(out.contains("[Response 1]"));
        assert!(!out.contains("final decision"));
        assert!(!out.contains("[RESULT]"));
    }

    #[tokio::test]
    async fn scores_are_deterministic_nonpositive_and_empty_scores_zero() {
        let mock = MockBackend::new(1);
        let a = mock.score_sequence_logprob("q", "r").await.unwrap();
        let b = mock.score_sequence_logprob("q", "r").await.unwrap();
        assert_eq!(a, b);
        assert!(a < 0.0);
        assert_eq!(mock.score_sequence_logprob("q", "").await.unwrap(), 0.0);
    }

    #[tokio::test]
    async fn different_seeds_disagree_somewhere() {
        let m1 = MockBackend::new(1);
        let m2 = MockBackend::new(2);
        let mut any_difference = false;
        for i in 0..8 {
            let s1 = m1.score_sequence_logprob("ctx", &format!("cont{i}")).await.unwrap();
            let s2 = m2.score_sequence_logprob("ctx", &format!("cont{i}")).await.unwrap();
            if s1 != s2 {
                any_difference = true;
            }
        }
        assert!(any_difference);
    }
}
