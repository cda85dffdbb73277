//! Source-dataset ingestion into the canonical instance schema.
//!
//! Three line formats are supported. Field mappings for the two external
//! formats are pinned here and regression-locked by the tests in this module:
//!
//! `autoj_pairwise` — one JSON object per line:
//!   `query` -> instruction, `response_1`/`response_2` -> responses,
//!   `label` (integer) -> reference_label with 0 = first, 1 = second,
//!   2 = tie, optional `source_1`/`source_2` -> response_sources,
//!   optional `id` (generated from the line number when absent).
//!
//! `preference_collection` — one JSON object per line:
//!   `instruction` -> instruction, `response_a`/`response_b` -> responses,
//!   `rubric` and `reference_answer` -> aux, `preference` ("A" | "B" | "tie")
//!   -> reference_label, optional `source_a`/`source_b` -> response_sources,
//!   optional `id`.
//!
//! `generic_canonical` — the canonical schema itself.
//!
//! Tie-labeled records never leave ingestion; they are counted and dropped.
//! Records that fail to parse or violate instance invariants (including
//! duplicate ids) count as malformed, and ingestion fails hard when the
//! malformed fraction exceeds the configured tolerance, which distinguishes
//! stray corruption from a wrong-format file.

use crate::model::{validate_instance, AuxInput, JudgeInstance, Label};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::BufRead;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SourceFormat {
    AutojPairwise,
    PreferenceCollection,
    GenericCanonical,
}

/// Where a dataset lives, how to read it, and which model name counts as the
/// teacher in downstream bias analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub path: PathBuf,
    pub format: SourceFormat,
    pub teacher_model_name: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub read: usize,
    pub kept: usize,
    pub ties_dropped: usize,
    pub malformed: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {malformed} of {read} lines malformed, above tolerance {tolerance}; wrong format?")]
    FormatMismatch { path: String, read: usize, malformed: usize, tolerance: f64 },
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Deserialize)]
struct AutojRow {
    #[serde(default)]
    id: Option<String>,
    query: String,
    response_1: String,
    response_2: String,
    label: i64,
    #[serde(default)]
    source_1: Option<String>,
    #[serde(default)]
    source_2: Option<String>,
}

#[derive(Deserialize)]
struct PreferenceCollectionRow {
    #[serde(default)]
    id: Option<String>,
    instruction: String,
    response_a: String,
    response_b: String,
    #[serde(default)]
    rubric: Option<String>,
    #[serde(default)]
    reference_answer: Option<String>,
    preference: String,
    #[serde(default)]
    source_a: Option<String>,
    #[serde(default)]
    source_b: Option<String>,
}

fn autoj_label(raw: i64) -> Option<Label> {
    match raw {
        0 => Some(Label::First),
        1 => Some(Label::Second),
        2 => Some(Label::Tie),
        _ => None,
    }
}

fn sources_pair(a: Option<String>, b: Option<String>) -> Option<[String; 2]> {
    match (a, b) {
        (Some(a), Some(b)) => Some([a, b]),
        _ => None,
    }
}

fn parse_line(format: SourceFormat, line: &str, line_number: usize) -> Option<JudgeInstance> {
    match format {
        SourceFormat::GenericCanonical => serde_json::from_str(line).ok(),
        SourceFormat::AutojPairwise => {
            let row: AutojRow = serde_json::from_str(line).ok()?;
            let label = autoj_label(row.label)?;
            Some(JudgeInstance {
                id: row.id.unwrap_or_else(|| format!("autoj-{line_number:05}")),
                instruction: row.query,
                responses: [row.response_1, row.response_2],
                aux: None,
                response_sources: sources_pair(row.source_1, row.source_2),
                reference_label: Some(label),
            })
        }
        SourceFormat::PreferenceCollection => {
            let row: PreferenceCollectionRow = serde_json::from_str(line).ok()?;
            let label = match row.preference.as_str() {
                "A" => Label::First,
                "B" => Label::Second,
                "tie" => Label::Tie,
                _ => return None,
            };
            let aux = if row.rubric.is_some() || row.reference_answer.is_some() {
                Some(AuxInput { rubric: row.rubric, reference_answer: row.reference_answer })
            } else {
                None
            };
            Some(JudgeInstance {
                id: row.id.unwrap_or_else(|| format!("prefcol-{line_number:05}")),
                instruction: row.instruction,
                responses: [row.response_a, row.response_b],
                aux,
                response_sources: sources_pair(row.source_a, row.source_b),
                reference_label: Some(label),
            })
        }
    }
}

/// Parse a source dataset into validated, tie-free canonical instances.
pub fn parse_dataset(
    descriptor: &DatasetDescriptor,
    malformed_tolerance: f64,
) -> Result<(Vec<JudgeInstance>, IngestSummary), IngestError> {
    let file = std::fs::File::open(&descriptor.path)
        .map_err(|source| IngestError::Io { path: descriptor.path.display().to_string(), source })?;
    let reader = std::io::BufReader::new(file);

    let mut summary = IngestSummary::default();
    let mut instances = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();

    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io { path: descriptor.path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        summary.read += 1;
        let Some(instance) = parse_line(descriptor.format, &line, index + 1) else {
            summary.malformed += 1;
            continue;
        };
        if !validate_instance(&instance).is_empty() || !seen_ids.insert(instance.id.clone()) {
            summary.malformed += 1;
            continue;
        }
        if instance.reference_label == Some(Label::Tie) {
            summary.ties_dropped += 1;
            continue;
        }
        instances.push(instance);
    }

    if summary.read > 0 && (summary.malformed as f64) > malformed_tolerance * (summary.read as f64) {
        return Err(IngestError::FormatMismatch {
            path: descriptor.path.display().to_string(),
            read: summary.read,
            malformed: summary.malformed,
            tolerance: malformed_tolerance,
        });
    }
    summary.kept = instances.len();
    Ok((instances, summary))
}

/// Deterministic shuffle-and-split. `|train| = round(ratio * N)`; the two
/// parts are disjoint and together exhaust the input.
pub fn split_train_val<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), IngestError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(IngestError::Argument(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    if items.is_empty() {
        return Err(IngestError::Argument("cannot split an empty list".to_string()));
    }
    let mut shuffled = items.to_vec();
    let mut rng = StdRng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let train_size = ((ratio * items.len() as f64).round() as usize).min(items.len());
    let val = shuffled.split_off(train_size);
    Ok((shuffled, val))
}

/// Deterministic subset of `min(n, N)` distinct items.
pub fn sample_subset<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    let mut shuffled = items.to_vec();
    let mut rng = StdRng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    shuffled.truncate(n);
    shuffled
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut file = std::fs::File::create(&path).unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        (dir, path)
    }

    fn descriptor(path: PathBuf, format: SourceFormat) -> DatasetDescriptor {
        DatasetDescriptor { path, format, teacher_model_name: "gpt-4".to_string() }
    }

    fn canonical_line(id: &str, label: &str) -> String {
        format!(
            "{{\"id\":\"{id}\",\"instruction\":\"q\",\"responses\":[\"r0\",\"r1\"],\"aux\":null,\"response_sources\":null,\"reference_label\":\"{label}\"}}"
        )
    }

    #[test]
    fn ties_are_dropped_and_counted() {
        let lines = [canonical_line("a", "0"), canonical_line("b", "tie"), canonical_line("c", "1")];
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let (_dir, path) = write_lines(&refs);
        let (instances, summary) = parse_dataset(&descriptor(path, SourceFormat::GenericCanonical), 0.1).unwrap();
        assert_eq!(instances.len(), 2);
        assert_eq!(summary.read, 3);
        assert_eq!(summary.ties_dropped, 1);
        assert_eq!(summary.malformed, 0);
        assert!(instances.iter().all(|i| i.reference_label != Some(Label::Tie)));
    }

    #[test]
    fn autoj_mapping_locked() {
        let (_dir, path) = write_lines(&[
            r#"{"query":"write a haiku","response_1":"five seven five","response_2":"free verse","label":0,"source_1":"gpt-4","source_2":"llama-2"}"#,
        ]);
        let (instances, _) = parse_dataset(&descriptor(path, SourceFormat::AutojPairwise), 0.1).unwrap();
        let instance = &instances[0];
        assert_eq!(instance.id, "autoj-00001");
        assert_eq!(instance.instruction, "write a haiku");
        assert_eq!(instance.responses, ["five seven five".to_string(), "free verse".to_string()]);
        assert_eq!(instance.reference_label, Some(Label::First));
        assert_eq!(instance.response_sources, Some(["gpt-4".to_string(), "llama-2".to_string()]));
    }

    #[test]
    fn autoj_tie_label_is_integer_two() {
        let (_dir, path) = write_lines(&[
            r#"{"query":"q","response_1":"a","response_2":"b","label":2}"#,
            r#"{"query":"q2","response_1":"a","response_2":"b","label":1}"#,
        ]);
        let (instances, summary) = parse_dataset(&descriptor(path, SourceFormat::AutojPairwise), 0.1).unwrap();
        assert_eq!(summary.ties_dropped, 1);
        assert_eq!(instances.len(), 1);
        assert_eq!(instances[0].reference_label, Some(Label::Second));
    }

    #[test]
    fn preference_collection_mapping_locked() {
        let (_dir, path) = write_lines(&[
            r#"{"instruction":"explain dns","response_a":"resolves names","response_b":"serves pages","rubric":"technical accuracy","reference_answer":"DNS resolves names to addresses.","preference":"A"}"#,
        ]);
        let (instances, _) = parse_dataset(&descriptor(path, SourceFormat::PreferenceCollection), 0.1).unwrap();
        let instance = &instances[0];
        assert_eq!(instance.id, "prefcol-00001");
        let aux = instance.aux.as_ref().unwrap();
        assert_eq!(aux.rubric.as_deref(), Some("technical accuracy"));
        assert_eq!(aux.reference_answer.as_deref(), Some("DNS resolves names to addresses."));
        assert_eq!(instance.reference_label, Some(Label::First));
    }

    #[test]
    fn one_bad_line_in_many_is_tolerated_and_counted() {
        let mut lines: Vec<String> = (0..99).map(|i| canonical_line(&format!("id{i}"), "0")).collect();
        lines.push("not json at all".to_string());
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let (_dir, path) = write_lines(&refs);
        let (instances, summary) = parse_dataset(&descriptor(path, SourceFormat::GenericCanonical), 0.1).unwrap();
        assert_eq!(instances.len(), 99);
        assert_eq!(summary.malformed, 1);
    }

    #[test]
    fn excess_malformed_lines_fail_hard() {
        let (_dir, path) = write_lines(&["garbage", "more garbage", &canonical_line("a", "0")]);
        let err = parse_dataset(&descriptor(path, SourceFormat::GenericCanonical), 0.1).unwrap_err();
        assert!(matches!(err, IngestError::FormatMismatch { malformed: 2, read: 3, .. }));
    }

    #[test]
    fn duplicate_ids_count_as_malformed() {
        let lines = [canonical_line("same", "0"), canonical_line("same", "1")];
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let (_dir, path) = write_lines(&refs);
        let (instances, summary) = parse_dataset(&descriptor(path, SourceFormat::GenericCanonical), 0.5).unwrap();
        assert_eq!(instances.len(), 1);
        assert_eq!(summary.malformed, 1);
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let descriptor = descriptor(PathBuf::from("/nonexistent/nowhere.jsonl"), SourceFormat::GenericCanonical);
        assert!(matches!(parse_dataset(&descriptor, 0.1), Err(IngestError::Io { .. })));
    }

    fn synthetic(n: usize) -> Vec<JudgeInstance> {
        (0..n).map(|i| JudgeInstance::new(format!("id{i}"), format!("q{i}"), "r0", "r1")).collect()
    }

    #[test]
    fn nine_to_one_split() {
        let instances = synthetic(10);
        let (train, val) = split_train_val(&instances, 0.9, 7).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(val.len(), 1);
        let train_ids: HashSet<_> = train.iter().map(|i| i.id.clone()).collect();
        assert!(!val.iter().any(|i| train_ids.contains(&i.id)));
    }

    #[test]
    fn split_is_deterministic() {
        let instances = synthetic(25);
        let first = split_train_val(&instances, 0.9, 7).unwrap();
        let second = split_train_val(&instances, 0.9, 7).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn split_rounding_edge_single_instance() {
        let instances = synthetic(1);
        let (train, val) = split_train_val(&instances, 0.9, 0).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(val.len(), 0);
    }

    #[test]
    fn split_rejects_bad_ratio() {
        let instances = synthetic(4);
        assert!(split_train_val(&instances, 0.0, 0).is_err());
        assert!(split_train_val(&instances, 1.0, 0).is_err());
        assert!(split_train_val(&instances, 1.5, 0).is_err());
    }

    #[test]
    fn sample_subset_edges() {
        let instances = synthetic(5);
        assert!(sample_subset(&instances, 0, 1).is_empty());
        assert_eq!(sample_subset(&instances, 9, 1).len(), 5);
        let sampled = sample_subset(&instances, 3, 1);
        assert_eq!(sampled.len(), 3);
        let distinct: HashSet<_> = sampled.iter().map(|i| i.id.clone()).collect();
        assert_eq!(distinct.len(), 3);
    }

    proptest! {
        #[test]
        fn split_partitions_input(n in 1usize..60, seed in 0u64..1000, ratio in 0.05f64..0.95) {
            let instances = synthetic(n);
            let (train, val) = split_train_val(&instances, ratio, seed).unwrap();
            prop_assert_eq!(train.len() + val.len(), n);
            let mut ids: Vec<String> = train.iter().chain(val.iter()).map(|i| i.id.clone()).collect();
            ids.sort();
            let mut expected: Vec<String> = instances.iter().map(|i| i.id.clone()).collect();
            expected.sort();
            prop_assert_eq!(ids, expected);
        }

        #[test]
        fn sample_is_deterministic_and_duplicate_free(n in 0usize..40, k in 0usize..50, seed in 0u64..1000) {
            let instances = synthetic(n);
            let first = sample_subset(&instances, k, seed);
            let second = sample_subset(&instances, k, seed);
            prop_assert_eq!(&first, &second);
            prop_assert_eq!(first.len(), k.min(n));
            let distinct: HashSet<_> = first.iter().map(|i| i.id.clone()).collect();
            prop_assert_eq!(distinct.len(), first.len());
        }
    }
}
