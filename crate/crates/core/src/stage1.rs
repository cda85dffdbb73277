//! Stage 1: label filtering by implicit reward margin.
//!
//! Instances where the teacher and assistant agree form the consensus pool,
//! which is exported as preference pairs for external DPO training of a
//! policy/reference model pair. Once that training has produced a scoring
//! endpoint, the margin for a pair is
//!
//! ```text
//! t = [log P_policy(chosen | q) - log P_ref(chosen | q)]
//!   - [log P_policy(rejected | q) - log P_ref(rejected | q)]
//! ```
//!
//! and only instances with `t > T` survive filtering. The scoring context is
//! the bare instruction, not a judge template. Comparison against `T` is
//! strictly greater-than, so `T = 0` genuinely excludes zero-margin pairs and
//! `T = -inf` acts as a no-filter sentinel.

use crate::backend::{run_batch, Backend, BackendError, BatchOutcome};
use crate::jsonl::to_jsonl_bytes;
use crate::manifest::sha256_hex;
use crate::model::{Annotation, JudgeInstance, Label};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Which annotation stream anchored the chosen/rejected ordering of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Consensus,
    Teacher,
}

/// One DPO preference pair: chosen is the response the anchoring label
/// prefers, rejected the other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub instance_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub label_source: LabelSource,
}

/// The four raw sequence scores and the margin they produce. The margin is
/// always recomputable from the stored scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub instance_id: String,
    pub logp_policy_chosen: f64,
    pub logp_ref_chosen: f64,
    pub logp_policy_rejected: f64,
    pub logp_ref_rejected: f64,
    pub margin: f64,
}

impl MarginRecord {
    pub fn recomputed(&self) -> f64 {
        (self.logp_policy_chosen - self.logp_ref_chosen) - (self.logp_policy_rejected - self.logp_ref_rejected)
    }

    pub fn is_consistent(&self, tolerance: f64) -> bool {
        (self.margin - self.recomputed()).abs() <= tolerance
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Stage1Error {
    #[error("annotation references instance {id:?} which is not in the dataset")]
    MissingInstance { id: String },
    #[error("no margin record for instance {id:?}")]
    MissingMargin { id: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which of the four scoring calls failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginTerm {
    PolicyChosen,
    RefChosen,
    PolicyRejected,
    RefRejected,
}

#[derive(Debug, thiserror::Error)]
pub enum MarginError {
    #[error("scoring term {term:?} failed: {source}")]
    Score {
        term: MarginTerm,
        #[source]
        source: BackendError,
    },
}

fn pair_from_label(instance: &JudgeInstance, label: Label, source: LabelSource) -> Option<PreferencePair> {
    let chosen_index = label.response_index()?;
    let chosen = instance.responses[chosen_index].clone();
    let rejected = instance.responses[1 - chosen_index].clone();
    // identical responses carry no preference signal and would violate the
    // chosen != rejected invariant
    if chosen == rejected {
        return None;
    }
    Some(PreferencePair { instance_id: instance.id.clone(), prompt: instance.instruction.clone(), chosen, rejected, label_source: source })
}

fn index_annotations(annotations: &[Annotation]) -> HashMap<&str, &Annotation> {
    annotations.iter().map(|a| (a.instance_id.as_str(), a)).collect()
}

fn check_annotations_reference_instances(
    annotations: &[Annotation],
    instances: &HashMap<&str, &JudgeInstance>,
) -> Result<(), Stage1Error> {
    for annotation in annotations {
        if !instances.contains_key(annotation.instance_id.as_str()) {
            return Err(Stage1Error::MissingInstance { id: annotation.instance_id.clone() });
        }
    }
    Ok(())
}

/// Pairs for instances where both annotators picked the same binary label.
/// Ties, unparsed outputs, and disagreements contribute nothing.
pub fn build_consensus(
    teacher: &[Annotation],
    assistant: &[Annotation],
    instances: &[JudgeInstance],
) -> Result<Vec<PreferencePair>, Stage1Error> {
    let by_id: HashMap<&str, &JudgeInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    check_annotations_reference_instances(teacher, &by_id)?;
    check_annotations_reference_instances(assistant, &by_id)?;
    let teacher_by_id = index_annotations(teacher);
    let assistant_by_id = index_annotations(assistant);

    let mut pairs = Vec::new();
    for instance in instances {
        let (Some(t), Some(a)) = (teacher_by_id.get(instance.id.as_str()), assistant_by_id.get(instance.id.as_str()))
        else {
            continue;
        };
        match (t.label, a.label) {
            (Some(tl), Some(al)) if tl.is_binary() && tl == al => {
                if let Some(pair) = pair_from_label(instance, tl, LabelSource::Consensus) {
                    pairs.push(pair);
                }
            }
            _ => {}
        }
    }
    Ok(pairs)
}

/// Pairs for every instance the anchor stream labeled with a binary label,
/// marked `Consensus` where the other stream agrees and `Teacher` where the
/// anchor stands alone. This is the pair set margins are computed over when
/// filtering a whole annotation stream rather than just the consensus pool.
pub fn build_margin_pairs(
    anchor: &[Annotation],
    other: &[Annotation],
    instances: &[JudgeInstance],
) -> Result<Vec<PreferencePair>, Stage1Error> {
    let by_id: HashMap<&str, &JudgeInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    check_annotations_reference_instances(anchor, &by_id)?;
    check_annotations_reference_instances(other, &by_id)?;
    let anchor_by_id = index_annotations(anchor);
    let other_by_id = index_annotations(other);

    let mut pairs = Vec::new();
    for instance in instances {
        let Some(a) = anchor_by_id.get(instance.id.as_str()) else { continue };
        let Some(label) = a.label.filter(|l| l.is_binary()) else { continue };
        let agreed = other_by_id
            .get(instance.id.as_str())
            .is_some_and(|o| o.label == Some(label));
        let source = if agreed { LabelSource::Consensus } else { LabelSource::Teacher };
        if let Some(pair) = pair_from_label(instance, label, source) {
            pairs.push(pair);
        }
    }
    Ok(pairs)
}

/// Training hyperparameters handed to the external DPO trainer. The training
/// itself never runs here; this manifest plus the exported pairs are the
/// complete handoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoTrainManifest {
    pub base_model: String,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: u32,
    pub max_input_length: u32,
    pub batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub warmup_ratio: f64,
    pub train_val_ratio: f64,
    pub consensus_sample_count: usize,
    pub seed: u64,
}

impl DpoTrainManifest {
    /// Reference settings: Llama-2-7b base, lr 1e-4, 3 epochs, max length
    /// 1024, batch 1 with 4 accumulation steps, 0.1 warmup, 9:1 split.
    pub fn reference_settings(consensus_sample_count: usize, seed: u64) -> Self {
        DpoTrainManifest {
            base_model: "Llama-2-7b-hf".to_string(),
            beta: 0.1,
            learning_rate: 1e-4,
            epochs: 3,
            max_input_length: 1024,
            batch_size: 1,
            gradient_accumulation_steps: 4,
            warmup_ratio: 0.1,
            train_val_ratio: 0.9,
            consensus_sample_count,
            seed,
        }
    }
}

/// Sidecar written next to the pairs file: hyperparameters plus the content
/// hash of the pairs, so the manifest changes iff the exported data changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoExportManifest {
    pub training: DpoTrainManifest,
    pub pair_count: usize,
    pub pairs_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSummary {
    pub path: PathBuf,
    pub manifest_path: PathBuf,
    pub lines: usize,
    pub content_sha256: String,
}

#[derive(Serialize)]
struct DpoPairRow<'a> {
    prompt: &'a str,
    chosen: &'a str,
    rejected: &'a str,
    instance_id: &'a str,
}

pub(crate) fn sidecar_path(out_path: &Path) -> PathBuf {
    out_path.with_extension("manifest.json")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Stage1Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| Stage1Error::Io { path: path.display().to_string(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| Stage1Error::Io { path: path.display().to_string(), source })
}

/// Write the DPO pairs JSONL plus its sidecar manifest. Identical inputs
/// always produce identical bytes and therefore identical hashes.
pub fn export_dpo_pairs(
    pairs: &[PreferencePair],
    manifest: &DpoTrainManifest,
    out_path: &Path,
) -> Result<FileSummary, Stage1Error> {
    if pairs.is_empty() {
        return Err(Stage1Error::Argument("refusing to export an empty pair set".to_string()));
    }
    let rows: Vec<DpoPairRow<'_>> = pairs
        .iter()
        .map(|p| DpoPairRow { prompt: &p.prompt, chosen: &p.chosen, rejected: &p.rejected, instance_id: &p.instance_id })
        .collect();
    let bytes = to_jsonl_bytes(&rows);
    write_bytes(out_path, &bytes)?;
    let pairs_sha256 = sha256_hex(&bytes);

    let sidecar = DpoExportManifest { training: manifest.clone(), pair_count: pairs.len(), pairs_sha256: pairs_sha256.clone() };
    let manifest_path = sidecar_path(out_path);
    let mut manifest_bytes = serde_json::to_vec_pretty(&sidecar).expect("manifest serializes");
    manifest_bytes.push(b'\n');
    write_bytes(&manifest_path, &manifest_bytes)?;

    Ok(FileSummary { path: out_path.to_path_buf(), manifest_path, lines: pairs.len(), content_sha256: pairs_sha256 })
}

/// Score one pair under the policy and reference backends and assemble its
/// margin record.
pub async fn compute_margin(
    policy: &dyn Backend,
    reference: &dyn Backend,
    pair: &PreferencePair,
) -> Result<MarginRecord, MarginError> {
    async fn score(
        backend: &dyn Backend,
        context: &str,
        continuation: &str,
        term: MarginTerm,
    ) -> Result<f64, MarginError> {
        backend
            .score_sequence_logprob(context, continuation)
            .await
            .map_err(|source| MarginError::Score { term, source })
    }
    let logp_policy_chosen = score(policy, &pair.prompt, &pair.chosen, MarginTerm::PolicyChosen).await?;
    let logp_ref_chosen = score(reference, &pair.prompt, &pair.chosen, MarginTerm::RefChosen).await?;
    let logp_policy_rejected = score(policy, &pair.prompt, &pair.rejected, MarginTerm::PolicyRejected).await?;
    let logp_ref_rejected = score(reference, &pair.prompt, &pair.rejected, MarginTerm::RefRejected).await?;
    let margin = (logp_policy_chosen - logp_ref_chosen) - (logp_policy_rejected - logp_ref_rejected);
    Ok(MarginRecord {
        instance_id: pair.instance_id.clone(),
        logp_policy_chosen,
        logp_ref_chosen,
        logp_policy_rejected,
        logp_ref_rejected,
        margin,
    })
}

/// Fan margin computation out over pairs with the given in-flight limit.
pub async fn compute_margins(
    policy: &dyn Backend,
    reference: &dyn Backend,
    pairs: &[PreferencePair],
    limit: usize,
) -> Vec<BatchOutcome<MarginRecord, MarginError>> {
    let requests: Vec<(String, &PreferencePair)> = pairs.iter().map(|p| (p.instance_id.clone(), p)).collect();
    run_batch(requests, limit, |_id, pair| compute_margin(policy, reference, pair)).await
}

/// Partition instances by `margin > threshold`. Every instance must have a
/// margin record.
pub fn filter_by_margin(
    instances: &[JudgeInstance],
    margins: &[MarginRecord],
    threshold: f64,
) -> Result<(Vec<JudgeInstance>, Vec<JudgeInstance>), Stage1Error> {
    let by_id: HashMap<&str, f64> = margins.iter().map(|m| (m.instance_id.as_str(), m.margin)).collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for instance in instances {
        let margin = by_id
            .get(instance.id.as_str())
            .copied()
            .ok_or_else(|| Stage1Error::MissingMargin { id: instance.id.clone() })?;
        if margin > threshold {
            kept.push(instance.clone());
        } else {
            dropped.push(instance.clone());
        }
    }
    Ok((kept, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub mean: f64,
    pub median: f64,
    pub fraction_nonpositive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub histogram: Vec<HistogramBin>,
    /// Absent when there are no margins.
    pub summary: Option<MarginSummary>,
}

/// Histogram over uniform bins anchored at the observed minimum, plus mean,
/// median, and the fraction of non-positive margins.
pub fn margin_stats(margins: &[f64], bin_width: f64) -> Result<MarginStats, Stage1Error> {
    if !(bin_width > 0.0) {
        return Err(Stage1Error::Argument(format!("bin width must be > 0, got {bin_width}")));
    }
    if margins.is_empty() {
        return Ok(MarginStats { histogram: Vec::new(), summary: None });
    }
    let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bin_count = (((max - min) / bin_width).floor() as usize) + 1;
    let mut counts = vec![0usize; bin_count];
    for &margin in margins {
        let index = (((margin - min) / bin_width).floor() as usize).min(bin_count - 1);
        counts[index] += 1;
    }
    let histogram = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin { lo: min + i as f64 * bin_width, hi: min + (i + 1) as f64 * bin_width, count })
        .collect();

    let mut sorted = margins.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let fraction_nonpositive = sorted.iter().filter(|&&m| m <= 0.0).count() as f64 / n as f64;

    Ok(MarginStats { histogram, summary: Some(MarginSummary { mean, median, fraction_nonpositive }) })
}

/// `bin_lo,bin_hi,count` CSV for the histogram.
pub fn histogram_csv(stats: &MarginStats) -> String {
    let mut csv = String::from("bin_lo,bin_hi,count\n");
    for bin in &stats.histogram {
        csv.push_str(&format!("{},{},{}\n", bin.lo, bin.hi, bin.count));
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::GenerationParams;
    use async_trait::async_trait;
    use proptest::prelude::*;

    fn instance(id: &str) -> JudgeInstance {
        JudgeInstance::new(id, format!("question {id}"), format!("first answer {id}"), format!("second answer {id}"))
    }

    fn annotation(id: &str, annotator: &str, label: Option<Label>) -> Annotation {
        Annotation {
            instance_id: id.to_string(),
            annotator: annotator.to_string(),
            feedback: "feedback".to_string(),
            label,
            raw: "raw".to_string(),
            attempts: 1,
        }
    }

    /// Scoring backend backed by an explicit (context, continuation) table.
    struct TableBackend {
        name: String,
        scores: HashMap<(String, String), f64>,
    }

    impl TableBackend {
        fn new(name: &str, entries: &[(&str, &str, f64)]) -> Self {
            let scores = entries
                .iter()
                .map(|(c, k, v)| ((c.to_string(), k.to_string()), *v))
                .collect();
            TableBackend { name: name.to_string(), scores }
        }
    }

    #[async_trait]
    impl Backend for TableBackend {
        fn name(&self) -> &str {
            &self.name
        }

        async fn complete(&self, _prompt: &str, _params: &GenerationParams) -> Result<String, BackendError> {
            unimplemented!("table backend only scores")
        }

        async fn score_sequence_logprob(&self, context: &str, continuation: &str) -> Result<f64, BackendError> {
            if continuation.is_empty() {
                return Ok(0.0);
            }
            self.scores
                .get(&(context.to_string(), continuation.to_string()))
                .copied()
                .ok_or_else(|| BackendError::ScoringUnsupported { name: self.name.clone() })
        }
    }

    #[test]
    fn consensus_agreement_emits_pair_anchored_at_shared_label() {
        let instances = vec![instance("a")];
        let teacher = vec![annotation("a", "teacher", Some(Label::First))];
        let assistant = vec![annotation("a", "assistant", Some(Label::First))];
        let pairs = build_consensus(&teacher, &assistant, &instances).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].chosen, "first answer a");
        assert_eq!(pairs[0].rejected, "second answer a");
        assert_eq!(pairs[0].label_source, LabelSource::Consensus);
    }

    #[test]
    fn consensus_disagreement_and_nonbinary_labels_excluded() {
        let instances = vec![instance("a"), instance("b"), instance("c"), instance("d")];
        let teacher = vec![
            annotation("a", "teacher", Some(Label::First)),
            annotation("b", "teacher", Some(Label::Tie)),
            annotation("c", "teacher", None),
            annotation("d", "teacher", Some(Label::Second)),
        ];
        let assistant = vec![
            annotation("a", "assistant", Some(Label::Second)),
            annotation("b", "assistant", Some(Label::Tie)),
            annotation("c", "assistant", Some(Label::First)),
            annotation("d", "assistant", Some(Label::Second)),
        ];
        let pairs = build_consensus(&teacher, &assistant, &instances).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].instance_id, "d");
    }

    #[test]
    fn annotation_for_unknown_instance_is_consistency_error() {
        let teacher = vec![annotation("ghost", "teacher", Some(Label::First))];
        let err = build_consensus(&teacher, &[], &[instance("a")]).unwrap_err();
        assert!(matches!(err, Stage1Error::MissingInstance { .. }));
    }

    #[test]
    fn margin_pairs_mark_label_source() {
        let instances = vec![instance("a"), instance("b")];
        let teacher = vec![
            annotation("a", "teacher", Some(Label::First)),
            annotation("b", "teacher", Some(Label::Second)),
        ];
        let assistant = vec![
            annotation("a", "assistant", Some(Label::First)),
            annotation("b", "assistant", Some(Label::First)),
        ];
        let pairs = build_margin_pairs(&teacher, &assistant, &instances).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].label_source, LabelSource::Consensus);
        assert_eq!(pairs[1].label_source, LabelSource::Teacher);
    }

    fn fixed_pair() -> PreferencePair {
        PreferencePair {
            instance_id: "p".to_string(),
            prompt: "q".to_string(),
            chosen: "good".to_string(),
            rejected: "bad".to_string(),
            label_source: LabelSource::Consensus,
        }
    }

    #[tokio::test]
    async fn margin_matches_hand_computed_example() {
        // scores (-10, -12, -15, -11) => t = (-10 + 12) - (-15 + 11) = 6.0
        let policy = TableBackend::new("policy", &[("q", "good", -10.0), ("q", "bad", -15.0)]);
        let reference = TableBackend::new("ref", &[("q", "good", -12.0), ("q", "bad", -11.0)]);
        let record = compute_margin(&policy, &reference, &fixed_pair()).await.unwrap();
        assert!((record.margin - 6.0).abs() < 1e-12);
        assert!(record.is_consistent(1e-9));

        let mut swapped = fixed_pair();
        std::mem::swap(&mut swapped.chosen, &mut swapped.rejected);
        let record = compute_margin(&policy, &reference, &swapped).await.unwrap();
        assert!((record.margin + 6.0).abs() < 1e-12);
    }

    #[tokio::test]
    async fn identical_policy_and_reference_give_zero_margin() {
        let backend = TableBackend::new("same", &[("q", "good", -3.5), ("q", "bad", -9.25)]);
        let record = compute_margin(&backend, &backend, &fixed_pair()).await.unwrap();
        assert_eq!(record.margin, 0.0);
    }

    #[tokio::test]
    async fn margin_error_names_the_failing_term() {
        let policy = TableBackend::new("policy", &[("q", "good", -10.0), ("q", "bad", -15.0)]);
        let reference = TableBackend::new("ref", &[("q", "good", -12.0)]); // missing rejected
        let err = compute_margin(&policy, &reference, &fixed_pair()).await.unwrap_err();
        assert!(matches!(err, MarginError::Score { term: MarginTerm::RefRejected, .. }));
    }

    fn margin_record(id: &str, margin: f64) -> MarginRecord {
        MarginRecord {
            instance_id: id.to_string(),
            logp_policy_chosen: margin,
            logp_ref_chosen: 0.0,
            logp_policy_rejected: 0.0,
            logp_ref_rejected: 0.0,
            margin,
        }
    }

    #[test]
    fn filter_keeps_strictly_above_threshold() {
        let instances = vec![instance("a"), instance("b"), instance("c")];
        let margins = vec![margin_record("a", 3.0), margin_record("b", 5.0), margin_record("c", 6.0)];
        let (kept, dropped) = filter_by_margin(&instances, &margins, 5.0).unwrap();
        assert_eq!(kept.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), vec!["c"]);
        assert_eq!(dropped.len(), 2);
    }

    #[test]
    fn negative_infinity_threshold_keeps_everything() {
        let instances = vec![instance("a"), instance("b")];
        let margins = vec![margin_record("a", -100.0), margin_record("b", 0.0)];
        let (kept, dropped) = filter_by_margin(&instances, &margins, f64::NEG_INFINITY).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(dropped.is_empty());
    }

    #[test]
    fn missing_margin_is_consistency_error() {
        let instances = vec![instance("a")];
        let err = filter_by_margin(&instances, &[], 0.0).unwrap_err();
        assert!(matches!(err, Stage1Error::MissingMargin { .. }));
    }

    #[test]
    fn stats_hand_counted_example() {
        let stats = margin_stats(&[-1.0, 1.0, 1.0, 3.0], 2.0).unwrap();
        let counts: Vec<usize> = stats.histogram.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![1, 2, 1]);
        assert_eq!(stats.histogram[0].lo, -1.0);
        assert_eq!(stats.histogram[0].hi, 1.0);
        let summary = stats.summary.unwrap();
        assert_eq!(summary.mean, 1.0);
        assert_eq!(summary.median, 1.0);
        assert_eq!(summary.fraction_nonpositive, 0.25);
    }

    #[test]
    fn stats_edges() {
        let single = margin_stats(&[2.5], 1.0).unwrap();
        assert_eq!(single.histogram.len(), 1);
        assert_eq!(single.histogram[0].count, 1);

        let zeros = margin_stats(&[0.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(zeros.summary.unwrap().fraction_nonpositive, 1.0);

        let empty = margin_stats(&[], 1.0).unwrap();
        assert!(empty.histogram.is_empty());
        assert!(empty.summary.is_none());

        assert!(margin_stats(&[1.0], 0.0).is_err());
        assert!(margin_stats(&[1.0], -2.0).is_err());
    }

    #[test]
    fn dpo_export_rows_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("dpo_pairs.jsonl");
        let pairs = vec![fixed_pair(), {
            let mut p = fixed_pair();
            p.instance_id = "p2".to_string();
            p
        }];
        let manifest = DpoTrainManifest::reference_settings(pairs.len(), 7);
        let first = export_dpo_pairs(&pairs, &manifest, &out).unwrap();
        assert_eq!(first.lines, 2);

        let text = std::fs::read_to_string(&out).unwrap();
        let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = row.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, vec!["prompt", "chosen", "rejected", "instance_id"]);

        let second = export_dpo_pairs(&pairs, &manifest, &out).unwrap();
        assert_eq!(first.content_sha256, second.content_sha256);

        let sidecar: DpoExportManifest =
            serde_json::from_str(&std::fs::read_to_string(first.manifest_path).unwrap()).unwrap();
        assert_eq!(sidecar.training.learning_rate, 1e-4);
        assert_eq!(sidecar.training.epochs, 3);
        assert_eq!(sidecar.training.max_input_length, 1024);
        assert_eq!(sidecar.pairs_sha256, first.content_sha256);
    }

    proptest! {
        /// Lower thresholds keep supersets; the partition is always exhaustive.
        #[test]
        fn filtering_is_monotone_and_exhaustive(
            margins in proptest::collection::vec(-20.0f64..20.0, 1..40),
            t1 in -10.0f64..10.0,
            t2 in -10.0f64..10.0,
        ) {
            let (low, high) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let instances: Vec<JudgeInstance> =
                (0..margins.len()).map(|i| instance(&format!("i{i:03}"))).collect();
            let records: Vec<MarginRecord> = margins
                .iter()
                .enumerate()
                .map(|(i, &m)| margin_record(&format!("i{i:03}"), m))
                .collect();
            let (kept_low, dropped_low) = filter_by_margin(&instances, &records, low).unwrap();
            let (kept_high, dropped_high) = filter_by_margin(&instances, &records, high).unwrap();
            prop_assert_eq!(kept_low.len() + dropped_low.len(), instances.len());
            prop_assert_eq!(kept_high.len() + dropped_high.len(), instances.len());
            let low_ids: std::collections::HashSet<&str> = kept_low.iter().map(|i| i.id.as_str()).collect();
            for kept in &kept_high {
                prop_assert!(low_ids.contains(kept.id.as_str()));
            }
        }

        /// Margin antisymmetry over arbitrary score quadruples.
        #[test]
        fn margin_antisymmetry(
            pc in -30.0f64..0.0, rc in -30.0f64..0.0, pr in -30.0f64..0.0, rr in -30.0f64..0.0,
        ) {
            let forward = (pc - rc) - (pr - rr);
            let backward = (pr - rr) - (pc - rc);
            prop_assert!((forward + backward).abs() < 1e-12);
        }
    }
}
