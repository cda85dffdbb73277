//! Stage 2: feedback debiasing by assistant-critique aggregation.
//!
//! For each surviving instance the assistant first critiques both responses
//! (no ranking), then writes a revised evaluation given the teacher's
//! original feedback and that critique. The revised evaluation's own
//! concluding decision is reconciled against the Stage-1 label: agreement
//! keeps the record, a tie drops it, and a contradiction drops it under the
//! default policy so no exported feedback argues against its own label.

use crate::annotate::{complete_with_extraction, AnnotateError};
use crate::backend::{run_batch, Backend, GenerationParams};
use crate::config::{ConflictPolicy, PipelineConfig};
use crate::model::{validate_instance, Annotation, JudgeInstance, Label, LabelConvention};
use crate::templates::{render_prompt, PromptTemplate, TemplateName};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Why a record did not survive to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Tie,
    Conflict,
    Unparseable,
}

/// Product of Stage 2 for one instance: the critique, the aggregated
/// feedback, the aggregation's own decision, and the reconciled label.
/// Exactly one of `label` and `drop_reason` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedRecord {
    pub instance_id: String,
    pub critique: String,
    pub feedback: String,
    pub decision: Option<Label>,
    pub label: Option<Label>,
    pub drop_reason: Option<DropReason>,
    /// Only set under [`ConflictPolicy::KeepStage1`] when the aggregated
    /// decision disagreed with the kept label.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub conflicted: bool,
}

impl DebiasedRecord {
    pub fn is_retained(&self) -> bool {
        self.drop_reason.is_none()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Stage2Error {
    #[error("instance {id:?} violates invariants: {violations}")]
    InvalidInstance { id: String, violations: String },
    #[error("teacher feedback and critique must be non-empty")]
    EmptyInput,
    #[error("aggregation unparseable after {attempts} attempts; last output: {raw:?}")]
    Unparseable { attempts: u32, raw: String },
    #[error("no teacher annotation with a binary label for instance {id:?}")]
    MissingTeacherLabel { id: String },
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
}

fn check_instance(instance: &JudgeInstance) -> Result<(), Stage2Error> {
    let violations = validate_instance(instance);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Stage2Error::InvalidInstance {
            id: instance.id.clone(),
            violations: violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "),
        })
    }
}

/// Ask the assistant to identify flaws in both responses. The critique
/// template forbids rankings, so no label is extracted here.
pub async fn critique_instance(
    assistant: &dyn Backend,
    instance: &JudgeInstance,
    params: &GenerationParams,
) -> Result<String, Stage2Error> {
    check_instance(instance)?;
    let template = PromptTemplate::get(TemplateName::Critique);
    let prompt = render_prompt(&template, instance, &HashMap::new()).map_err(AnnotateError::Render)?;
    let critique = assistant
        .complete(&prompt, params)
        .await
        .map_err(|source| AnnotateError::Backend { attempts: 1, source })?;
    Ok(critique)
}

/// Ask the assistant for a revised evaluation given the teacher's feedback
/// (comparative judgment slot) and the critique (critical analysis slot).
/// The revised evaluation may conclude with a tie.
pub async fn aggregate_feedback(
    assistant: &dyn Backend,
    instance: &JudgeInstance,
    teacher_feedback: &str,
    critique: &str,
    params: &GenerationParams,
    max_attempts: u32,
    template_name: TemplateName,
) -> Result<(String, Label), Stage2Error> {
    check_instance(instance)?;
    if teacher_feedback.is_empty() || critique.is_empty() {
        return Err(Stage2Error::EmptyInput);
    }
    let template = PromptTemplate::get(template_name);
    let mut extra = HashMap::new();
    extra.insert("evaluation_A", teacher_feedback.to_string());
    extra.insert("evaluation_B", critique.to_string());
    let prompt = render_prompt(&template, instance, &extra).map_err(AnnotateError::Render)?;
    let convention = LabelConvention::autoj();
    let (raw, label, attempts) =
        complete_with_extraction(assistant, &prompt, &convention, true, params, max_attempts).await?;
    match label {
        Some(label) => Ok((raw, label)),
        None => Err(Stage2Error::Unparseable { attempts, raw }),
    }
}

/// Outcome of reconciling the aggregation's decision with the Stage-1 label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reconciled {
    Keep { label: Label, conflicted: bool },
    Drop(DropReason),
}

/// Reconcile the aggregated decision against the Stage-1 label.
///
/// Agreement keeps the Stage-1 label; a tie always drops. A contradiction
/// drops under [`ConflictPolicy::Drop`] and keeps the Stage-1 label with a
/// conflict flag under [`ConflictPolicy::KeepStage1`].
pub fn reconcile_label(stage1_label: Label, decision: Label, policy: ConflictPolicy) -> Reconciled {
    debug_assert!(stage1_label.is_binary(), "stage-1 labels are binary by construction");
    if decision == Label::Tie {
        return Reconciled::Drop(DropReason::Tie);
    }
    if decision == stage1_label {
        return Reconciled::Keep { label: stage1_label, conflicted: false };
    }
    match policy {
        ConflictPolicy::Drop => Reconciled::Drop(DropReason::Conflict),
        ConflictPolicy::KeepStage1 => Reconciled::Keep { label: stage1_label, conflicted: true },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub input: usize,
    pub exported: usize,
    pub dropped_tie: usize,
    pub dropped_conflict: usize,
    pub dropped_unparseable: usize,
    pub failed: usize,
}

/// Run critique + aggregation over every instance, reconciling against the
/// teacher's Stage-1 labels. Instances are processed concurrently; the two
/// backend calls per instance stay sequential because the critique feeds the
/// aggregation prompt. Output is sorted by instance id.
pub async fn debias_instances(
    assistant: &dyn Backend,
    instances: &[JudgeInstance],
    teacher_annotations: &[Annotation],
    config: &PipelineConfig,
    aggregate_template: TemplateName,
) -> Result<(Vec<DebiasedRecord>, Stage2Summary, Vec<(String, Stage2Error)>), Stage2Error> {
    let teacher_by_id: HashMap<&str, &Annotation> =
        teacher_annotations.iter().map(|a| (a.instance_id.as_str(), a)).collect();
    // fail fast on missing labels so a half-run doesn't silently shrink
    for instance in instances {
        let annotation = teacher_by_id
            .get(instance.id.as_str())
            .ok_or_else(|| Stage2Error::MissingTeacherLabel { id: instance.id.clone() })?;
        match annotation.label {
            Some(label) if label.is_binary() => {}
            _ => return Err(Stage2Error::MissingTeacherLabel { id: instance.id.clone() }),
        }
    }

    let requests: Vec<(String, &JudgeInstance)> =
        instances.iter().map(|instance| (instance.id.clone(), instance)).collect();
    let outcomes = run_batch(requests, config.concurrency, |_id, instance| {
        let teacher = teacher_by_id[instance.id.as_str()];
        let stage1_label = teacher.label.expect("checked above");
        async move {
            let critique = critique_instance(assistant, instance, &config.sampling).await?;
            let aggregated = aggregate_feedback(
                assistant,
                instance,
                &teacher.feedback,
                &critique,
                &config.sampling,
                config.max_attempts,
                aggregate_template,
            )
            .await;
            let record = match aggregated {
                Ok((feedback, decision)) => match reconcile_label(stage1_label, decision, config.conflict_policy) {
                    Reconciled::Keep { label, conflicted } => DebiasedRecord {
                        instance_id: instance.id.clone(),
                        critique,
                        feedback,
                        decision: Some(decision),
                        label: Some(label),
                        drop_reason: None,
                        conflicted,
                    },
                    Reconciled::Drop(reason) => DebiasedRecord {
                        instance_id: instance.id.clone(),
                        critique,
                        feedback,
                        decision: Some(decision),
                        label: None,
                        drop_reason: Some(reason),
                        conflicted: false,
                    },
                },
                Err(Stage2Error::Unparseable { raw, .. }) => DebiasedRecord {
                    instance_id: instance.id.clone(),
                    critique,
                    feedback: raw,
                    decision: None,
                    label: None,
                    drop_reason: Some(DropReason::Unparseable),
                    conflicted: false,
                },
                Err(other) => return Err(other),
            };
            Ok(record)
        }
    })
    .await;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut summary = Stage2Summary { input: instances.len(), ..Stage2Summary::default() };
    for outcome in outcomes {
        match outcome.result {
            Ok(record) => {
                match record.drop_reason {
                    None => summary.exported += 1,
                    Some(DropReason::Tie) => summary.dropped_tie += 1,
                    Some(DropReason::Conflict) => summary.dropped_conflict += 1,
                    Some(DropReason::Unparseable) => summary.dropped_unparseable += 1,
                }
                records.push(record);
            }
            Err(error) => {
                summary.failed += 1;
                failures.push((outcome.id, error));
            }
        }
    }
    Ok((records, summary, failures))
}
