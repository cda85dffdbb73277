//! Judge-prompt orchestration: render a template, call a backend, and pull
//! the decision label out of the generated text.
//!
//! Extraction is regex-based, case-insensitive, and whitespace-tolerant.
//! When a generation carries several decision phrases (models often restate
//! the candidates mid-analysis), the last occurrence wins, because the
//! templates instruct models to conclude with the decision. Unparseable
//! generations are regenerated up to a bounded number of attempts.

use crate::backend::{run_batch, Backend, BackendError, GenerationParams};
use crate::config::PipelineConfig;
use crate::model::{Annotation, ConventionStyle, JudgeInstance, Label, LabelConvention};
use crate::templates::{render_prompt, PromptTemplate, RenderError};
use regex::Regex;
use std::collections::HashMap;

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("backend failed on all {attempts} attempts: {source}")]
    Backend {
        attempts: u32,
        #[source]
        source: BackendError,
    },
}

fn marker_pattern(marker: &str) -> String {
    let mut pattern = marker
        .split_whitespace()
        .map(regex::escape)
        .collect::<Vec<_>>()
        .join(r"\s+");
    // guard against the marker matching as a prefix of a longer token,
    // e.g. "Response 1" inside "Response 12"
    if marker.chars().last().is_some_and(|c| c.is_alphanumeric()) {
        pattern.push_str(r"\b");
    }
    pattern
}

fn decision_regex(convention: &LabelConvention, allow_tie: bool) -> Regex {
    let first = marker_pattern(&convention.first_marker);
    let second = marker_pattern(&convention.second_marker);
    let tie = match (&convention.tie_marker, allow_tie) {
        (Some(marker), true) => Some(marker_pattern(marker)),
        _ => None,
    };
    let mut alternatives = format!("(?P<first>{first})|(?P<second>{second})");
    if let Some(tie) = tie {
        alternatives.push_str(&format!("|(?P<tie>{tie})"));
    }
    let pattern = match convention.style {
        ConventionStyle::AutojDecision => {
            format!(r"(?i)the\s+final\s+decision\s+is\s*:?\s*(?:{alternatives})")
        }
        ConventionStyle::ResultAb => {
            format!(r"(?i)\[\s*RESULT\s*\]\s*:?\s*\(?\s*(?:{alternatives})")
        }
    };
    Regex::new(&pattern).expect("decision pattern compiles for checked conventions")
}

/// Scan `text` for the convention's decision phrase and map the marker back
/// to a label. Returns `None` when no phrase is found. A tie is only ever
/// returned when `allow_tie` is set; with it unset the tie marker simply does
/// not participate in matching.
pub fn extract_decision(text: &str, convention: &LabelConvention, allow_tie: bool) -> Option<Label> {
    let regex = decision_regex(convention, allow_tie);
    let captures = regex.captures_iter(text).last()?;
    if captures.name("first").is_some() {
        Some(Label::First)
    } else if captures.name("second").is_some() {
        Some(Label::Second)
    } else {
        debug_assert!(captures.name("tie").is_some());
        Some(Label::Tie)
    }
}

/// One completion/extraction attempt loop shared by annotation and feedback
/// aggregation. Returns the raw text, extracted label, and the attempt number
/// that produced it; `label` is `None` only after exhausting `max_attempts`.
pub(crate) async fn complete_with_extraction(
    backend: &dyn Backend,
    prompt: &str,
    convention: &LabelConvention,
    allow_tie: bool,
    params: &GenerationParams,
    max_attempts: u32,
) -> Result<(String, Option<Label>, u32), AnnotateError> {
    assert!(max_attempts >= 1, "max_attempts must be >= 1");
    let mut last_raw: Option<String> = None;
    let mut last_error: Option<BackendError> = None;
    for attempt in 1..=max_attempts {
        match backend.complete(prompt, params).await {
            Ok(raw) => {
                if let Some(label) = extract_decision(&raw, convention, allow_tie) {
                    return Ok((raw, Some(label), attempt));
                }
                last_raw = Some(raw);
            }
            Err(error) => last_error = Some(error),
        }
    }
    match last_raw {
        Some(raw) => Ok((raw, None, max_attempts)),
        None => Err(AnnotateError::Backend {
            attempts: max_attempts,
            source: last_error.expect("no raw text implies at least one backend error"),
        }),
    }
}

/// Annotate a single instance under the bounded-retry protocol.
///
/// The first parseable generation wins and its attempt number is recorded;
/// otherwise the annotation carries `label = None`, `attempts = max_attempts`,
/// and the last raw generation.
pub async fn annotate_instance(
    backend: &dyn Backend,
    instance: &JudgeInstance,
    template: &PromptTemplate,
    convention: &LabelConvention,
    params: &GenerationParams,
    max_attempts: u32,
    annotator: &str,
) -> Result<Annotation, AnnotateError> {
    let prompt = render_prompt(template, instance, &HashMap::new())?;
    let (raw, label, attempts) =
        complete_with_extraction(backend, &prompt, convention, false, params, max_attempts).await?;
    Ok(Annotation {
        instance_id: instance.id.clone(),
        annotator: annotator.to_string(),
        feedback: raw.trim().to_string(),
        label,
        raw,
        attempts,
    })
}

/// Per-dataset annotation run: every instance gets exactly one annotation
/// unless its backend failed on every attempt, in which case the failure is
/// reported alongside. Output is sorted by instance id, so it is invariant to
/// input order and completion order.
#[derive(Debug)]
pub struct AnnotateRun {
    pub annotations: Vec<Annotation>,
    pub failures: Vec<(String, AnnotateError)>,
}

impl AnnotateRun {
    pub fn unparsed_count(&self) -> usize {
        self.annotations.iter().filter(|a| a.label.is_none()).count()
    }
}

pub async fn annotate_dataset(
    backend: &dyn Backend,
    instances: &[JudgeInstance],
    template: &PromptTemplate,
    convention: &LabelConvention,
    params: &GenerationParams,
    config: &PipelineConfig,
    annotator: &str,
) -> AnnotateRun {
    let requests: Vec<(String, &JudgeInstance)> =
        instances.iter().map(|instance| (instance.id.clone(), instance)).collect();
    let outcomes = run_batch(requests, config.concurrency, |_id, instance| {
        annotate_instance(backend, instance, template, convention, params, config.max_attempts, annotator)
    })
    .await;

    let mut annotations = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome.result {
            Ok(annotation) => annotations.push(annotation),
            Err(error) => failures.push((outcome.id, error)),
        }
    }
    AnnotateRun { annotations, failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::model::{decision_phrase, label_to_marker};
    use crate::templates::TemplateName;
    use async_trait::async_trait;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    /// Emits unparseable text until the configured call, then a decision.
    struct ScriptedBackend {
        calls: AtomicU32,
        parseable_on: Option<u32>,
    }

    impl ScriptedBackend {
        fn parseable_on(call: u32) -> Self {
            ScriptedBackend { calls: AtomicU32::new(0), parseable_on: Some(call) }
        }

        fn never_parseable() -> Self {
            ScriptedBackend { calls: AtomicU32::new(0), parseable_on: None }
        }
    }

    #[async_trait]
    impl Backend for ScriptedBackend {
        fn name(&self) -> &str {
            "scripted"
        }

        async fn complete(&self, _prompt: &str, _params: &GenerationParams) -> Result<String, BackendError> {
            let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
            if self.parseable_on == Some(call) {
                Ok("analysis text. So, the final decision is Response 2".to_string())
            } else {
                Ok("rambling output with no conclusion".to_string())
            }
        }

        async fn score_sequence_logprob(&self, _context: &str, _continuation: &str) -> Result<f64, BackendError> {
            Err(BackendError::ScoringUnsupported { name: "scripted".to_string() })
        }
    }

    fn autoj() -> LabelConvention {
        LabelConvention::autoj()
    }

    #[test]
    fn last_decision_phrase_wins() {
        let text = "Response 1 looks strong at first. The final decision is Response 1... \
                    but on reflection, So, the final decision is Response 2";
        assert_eq!(extract_decision(text, &autoj(), false), Some(Label::Second));
    }

    #[test]
    fn result_ab_extraction() {
        assert_eq!(extract_decision("great analysis [RESULT] A", &LabelConvention::result_ab(), false), Some(Label::First));
        assert_eq!(extract_decision("feedback [RESULT] (B)", &LabelConvention::result_ab(), false), Some(Label::Second));
        assert_eq!(extract_decision("no verdict given", &LabelConvention::result_ab(), false), None);
    }

    #[test]
    fn tie_requires_allow_tie() {
        let text = "mentions Response 1 early but ends: the final decision is Tie";
        assert_eq!(extract_decision(text, &autoj(), true), Some(Label::Tie));
        // with ties disallowed the tie marker is invisible; the earlier
        // binary phrase (if any) wins instead
        assert_eq!(extract_decision(text, &autoj(), false), None);
        let text2 = "the final decision is Response 1. Later: the final decision is Tie";
        assert_eq!(extract_decision(text2, &autoj(), false), Some(Label::First));
    }

    #[test]
    fn flexible_case_and_whitespace() {
        assert_eq!(
            extract_decision("THE FINAL DECISION IS   response   2", &autoj(), false),
            Some(Label::Second)
        );
        assert_eq!(extract_decision("[result]   a", &LabelConvention::result_ab(), false), Some(Label::First));
    }

    #[test]
    fn marker_prefix_does_not_false_match() {
        // "Response 1" must not match inside "Response 12"
        assert_eq!(extract_decision("the final decision is Response 12", &autoj(), false), None);
    }

    #[tokio::test]
    async fn first_parseable_attempt_wins() {
        let backend = ScriptedBackend::parseable_on(3);
        let instance = JudgeInstance::new("i1", "q", "r0", "r1");
        let template = PromptTemplate::get(TemplateName::AutojJudge);
        let annotation = annotate_instance(
            &backend,
            &instance,
            &template,
            &autoj(),
            &GenerationParams::default(),
            10,
            "teacher",
        )
        .await
        .unwrap();
        assert_eq!(annotation.label, Some(Label::Second));
        assert_eq!(annotation.attempts, 3);
    }

    #[tokio::test]
    async fn exhausted_attempts_yield_label_none() {
        let backend = ScriptedBackend::never_parseable();
        let instance = JudgeInstance::new("i1", "q", "r0", "r1");
        let template = PromptTemplate::get(TemplateName::AutojJudge);
        let annotation = annotate_instance(
            &backend,
            &instance,
            &template,
            &autoj(),
            &GenerationParams::default(),
            10,
            "teacher",
        )
        .await
        .unwrap();
        assert_eq!(annotation.label, None);
        assert_eq!(annotation.attempts, 10);
        assert_eq!(annotation.raw, "rambling output with no conclusion");
    }

    #[tokio::test]
    async fn dataset_annotation_is_order_invariant() {
        let backend = MockBackend::new(5).with_jitter(4);
        let mut instances: Vec<JudgeInstance> = (0..8)
            .map(|i| JudgeInstance::new(format!("id{i}"), format!("question {i}"), "first answer", "second answer"))
            .collect();
        let template = PromptTemplate::get(TemplateName::AutojJudge);
        let config = PipelineConfig { concurrency: 3, ..PipelineConfig::default() };
        let forward = annotate_dataset(
            &backend,
            &instances,
            &template,
            &autoj(),
            &GenerationParams::default(),
            &config,
            "teacher",
        )
        .await;
        instances.reverse();
        let reversed = annotate_dataset(
            &backend,
            &instances,
            &template,
            &autoj(),
            &GenerationParams::default(),
            &config,
            "teacher",
        )
        .await;
        assert_eq!(forward.annotations, reversed.annotations);
        assert!(forward.failures.is_empty());
    }

    proptest! {
        /// Extraction recovers any label embedded in fuzzed surrounding prose
        /// for both conventions.
        #[test]
        fn roundtrip_recovers_label(
            label_index in 0usize..3,
            use_result_ab in proptest::bool::ANY,
            prefix in "[a-zA-Z0-9 .,\n]{0,60}",
        ) {
            let label = [Label::First, Label::Second, Label::Tie][label_index];
            let convention = if use_result_ab { LabelConvention::result_ab() } else { autoj() };
            prop_assume!(label_to_marker(label, &convention).is_ok());
            let allow_tie = label == Label::Tie;
            let phrase = decision_phrase(label, &convention).unwrap();
            let text = format!("{prefix}{phrase}");
            prop_assert_eq!(extract_decision(&text, &convention, allow_tie), Some(label));
        }

        /// A tie never comes back when ties are disallowed, whatever the text.
        #[test]
        fn no_tie_without_allow_tie(text in "[a-zA-Z0-9 .,/\\[\\]]{0,120}") {
            let extracted = extract_decision(&text, &autoj(), false);
            prop_assert_ne!(extracted, Some(Label::Tie));
        }
    }
}
