//! Canonical domain types shared by every pipeline stage.
//!
//! A [`JudgeInstance`] is one pairwise-ranking task; an [`Annotation`] is one
//! judge output over it. Labels index the response pair: `First` means the
//! first response wins, `Second` the second. [`LabelConvention`] describes how
//! a winner is spelled out in generated text and is the single source of truth
//! for both rendering decision phrases and extracting them back.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

/// Pairwise preference label. Serialized as `"0"`, `"1"`, or `"tie"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "0")]
    First,
    #[serde(rename = "1")]
    Second,
    #[serde(rename = "tie")]
    Tie,
}

impl Label {
    /// Index of the winning response: 0 for `First`, 1 for `Second`, none for `Tie`.
    pub fn response_index(self) -> Option<usize> {
        match self {
            Label::First => Some(0),
            Label::Second => Some(1),
            Label::Tie => None,
        }
    }

    pub fn from_response_index(index: usize) -> Option<Label> {
        match index {
            0 => Some(Label::First),
            1 => Some(Label::Second),
            _ => None,
        }
    }

    /// The other binary label; `Tie` has none.
    pub fn flipped(self) -> Option<Label> {
        match self {
            Label::First => Some(Label::Second),
            Label::Second => Some(Label::First),
            Label::Tie => None,
        }
    }

    pub fn is_binary(self) -> bool {
        self != Label::Tie
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::First => write!(f, "0"),
            Label::Second => write!(f, "1"),
            Label::Tie => write!(f, "tie"),
        }
    }
}

/// Optional evaluation context accompanying an instance: a grading rubric
/// and/or a reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuxInput {
    #[serde(default)]
    pub rubric: Option<String>,
    #[serde(default)]
    pub reference_answer: Option<String>,
}

/// One pairwise-ranking task: an instruction and two candidate responses.
///
/// The canonical JSONL schema is one object per line with keys `id`,
/// `instruction`, `responses` (array of 2 strings), `aux` (object or null),
/// `response_sources` (array of 2 strings or null), `reference_label`
/// (`"0"` | `"1"` | `"tie"` | null).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeInstance {
    pub id: String,
    pub instruction: String,
    pub responses: [String; 2],
    #[serde(default)]
    pub aux: Option<AuxInput>,
    #[serde(default)]
    pub response_sources: Option<[String; 2]>,
    #[serde(default)]
    pub reference_label: Option<Label>,
}

impl JudgeInstance {
    pub fn new(id: impl Into<String>, instruction: impl Into<String>, r0: impl Into<String>, r1: impl Into<String>) -> Self {
        JudgeInstance {
            id: id.into(),
            instruction: instruction.into(),
            responses: [r0.into(), r1.into()],
            aux: None,
            response_sources: None,
            reference_label: None,
        }
    }
}

/// One judge output: feedback text plus the extracted label.
///
/// `label` is `None` when no decision marker could be extracted after the
/// configured maximum number of attempts; in that case `attempts` equals
/// that maximum and `raw` preserves the last generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub instance_id: String,
    pub annotator: String,
    pub feedback: String,
    pub label: Option<Label>,
    pub raw: String,
    pub attempts: u32,
}

/// Surface form used to spell out the winner in generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConventionStyle {
    /// `So, the final decision is Response 1` (tie-capable).
    AutojDecision,
    /// `[RESULT] A` / `[RESULT] B` (no tie form).
    ResultAb,
}

/// Marker strings for each label under a given style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelConvention {
    pub style: ConventionStyle,
    pub first_marker: String,
    pub second_marker: String,
    /// Only meaningful for [`ConventionStyle::AutojDecision`].
    #[serde(default)]
    pub tie_marker: Option<String>,
}

impl LabelConvention {
    /// `Response 1` / `Response 2` / `Tie` under the decision-statement style.
    pub fn autoj() -> Self {
        LabelConvention {
            style: ConventionStyle::AutojDecision,
            first_marker: "Response 1".to_string(),
            second_marker: "Response 2".to_string(),
            tie_marker: Some("Tie".to_string()),
        }
    }

    /// `A` / `B` under the `[RESULT]` style.
    pub fn result_ab() -> Self {
        LabelConvention {
            style: ConventionStyle::ResultAb,
            first_marker: "A".to_string(),
            second_marker: "B".to_string(),
            tie_marker: None,
        }
    }

    /// Check marker invariants: non-empty and pairwise distinct.
    pub fn check(&self) -> Result<(), ModelError> {
        let mut markers = vec![self.first_marker.as_str(), self.second_marker.as_str()];
        if let Some(t) = &self.tie_marker {
            markers.push(t.as_str());
        }
        if markers.iter().any(|m| m.is_empty()) {
            return Err(ModelError::InvalidConvention("empty marker".to_string()));
        }
        let distinct: HashSet<&str> = markers.iter().copied().collect();
        if distinct.len() != markers.len() {
            return Err(ModelError::InvalidConvention("markers not pairwise distinct".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("label {label} has no marker under the {style:?} convention")]
    UnsupportedLabel { label: Label, style: ConventionStyle },
    #[error("invalid label convention: {0}")]
    InvalidConvention(String),
}

/// Marker string for a label under a convention.
///
/// `Tie` is only representable under [`ConventionStyle::AutojDecision`].
pub fn label_to_marker(label: Label, convention: &LabelConvention) -> Result<&str, ModelError> {
    match label {
        Label::First => Ok(&convention.first_marker),
        Label::Second => Ok(&convention.second_marker),
        Label::Tie => match (convention.style, &convention.tie_marker) {
            (ConventionStyle::AutojDecision, Some(m)) => Ok(m),
            _ => Err(ModelError::UnsupportedLabel { label, style: convention.style }),
        },
    }
}

/// Full concluding phrase for a label, as the templates instruct models to
/// write it. This is what generated feedback is expected to end with.
pub fn decision_phrase(label: Label, convention: &LabelConvention) -> Result<String, ModelError> {
    let marker = label_to_marker(label, convention)?;
    Ok(match convention.style {
        ConventionStyle::AutojDecision => format!("So, the final decision is {marker}"),
        ConventionStyle::ResultAb => format!("[RESULT] {marker}"),
    })
}

/// A violated instance invariant. Violations are data, not faults: callers
/// decide whether to drop, report, or abort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    EmptyInstruction,
    EmptyResponse { index: usize },
    DuplicateId { id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty id"),
            Violation::EmptyInstruction => write!(f, "empty instruction"),
            Violation::EmptyResponse { index } => write!(f, "empty response at index {index}"),
            Violation::DuplicateId { id } => write!(f, "duplicate id {id:?}"),
        }
    }
}

/// Check the per-instance invariants. Ok iff the returned list is empty.
pub fn validate_instance(instance: &JudgeInstance) -> Vec<Violation> {
    let mut violations = Vec::new();
    if instance.id.is_empty() {
        violations.push(Violation::EmptyId);
    }
    if instance.instruction.is_empty() {
        violations.push(Violation::EmptyInstruction);
    }
    for (index, response) in instance.responses.iter().enumerate() {
        if response.is_empty() {
            violations.push(Violation::EmptyResponse { index });
        }
    }
    violations
}

/// Dataset-level validation: per-instance invariants plus id uniqueness.
pub fn validate_dataset(instances: &[JudgeInstance]) -> Vec<(String, Violation)> {
    let mut seen = HashSet::new();
    let mut violations = Vec::new();
    for instance in instances {
        for v in validate_instance(instance) {
            violations.push((instance.id.clone(), v));
        }
        if !seen.insert(instance.id.as_str()) {
            violations.push((instance.id.clone(), Violation::DuplicateId { id: instance.id.clone() }));
        }
    }
    violations
}
