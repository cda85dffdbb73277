//! Final fine-tune dataset export and baseline compositions.
//!
//! The export is a handoff: prompts are rendered with the judge template,
//! completions are the debiased feedback, and the sidecar manifest carries
//! the training hyperparameters plus content hashes of everything that went
//! in. Gradients never run here. Every exported completion is re-checked to
//! extract back to its record's label before it is allowed out the door.

use crate::annotate::extract_decision;
use crate::jsonl::to_jsonl_bytes;
use crate::manifest::sha256_hex;
use crate::model::{Annotation, JudgeInstance, Label, LabelConvention};
use crate::stage1::{sidecar_path, FileSummary};
use crate::stage2::DebiasedRecord;
use crate::templates::{render_prompt, PromptTemplate, RenderError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("record {id:?} was dropped ({reason}) and cannot be exported")]
    DroppedRecord { id: String, reason: String },
    #[error("record {id:?} references an instance that is not present")]
    MissingInstance { id: String },
    #[error("record {id:?} has no binary label")]
    MissingLabel { id: String },
    #[error("completion for {id:?} does not extract back to its label {label}")]
    CompletionLabelMismatch { id: String, label: Label },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("mode {mode:?} does not accept the given sources")]
    ModeSourceMismatch { mode: ComposeMode },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Fine-tuning hyperparameters recorded in the export manifest. The loss is
/// the trainer's choice between plain supervised cross-entropy and a
/// reference-normalized likelihood objective; both are listed so the handoff
/// does not silently commit to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftTrainManifest {
    pub base_model: String,
    pub learning_rate: f64,
    pub epochs: u32,
    pub max_input_length: u32,
    pub batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub train_val_ratio: f64,
    pub optimizer: String,
    pub adapter: String,
    pub objective_options: Vec<String>,
    pub seed: u64,
}

impl SftTrainManifest {
    /// Reference settings: Mistral-7B-Instruct base, lr 1e-5, 2 epochs,
    /// max length 2048, batch 4 with 4 accumulation steps, AdamW + LoRA,
    /// 9:1 split.
    pub fn reference_settings(seed: u64) -> Self {
        SftTrainManifest {
            base_model: "Mistral-7B-Instruct-v0.3".to_string(),
            learning_rate: 1e-5,
            epochs: 2,
            max_input_length: 2048,
            batch_size: 4,
            gradient_accumulation_steps: 4,
            train_val_ratio: 0.9,
            optimizer: "AdamW".to_string(),
            adapter: "LoRA".to_string(),
            objective_options: vec![
                "supervised_cross_entropy".to_string(),
                "reference_normalized_likelihood".to_string(),
            ],
            seed,
        }
    }
}

/// Sidecar written next to the SFT file: hyperparameters plus content hashes
/// of the exported lines and of both inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExportManifest {
    pub training: SftTrainManifest,
    pub record_count: usize,
    pub sft_sha256: String,
    pub records_sha256: String,
    pub instances_sha256: String,
}

#[derive(Serialize)]
struct SftRow<'a> {
    prompt: String,
    completion: &'a str,
    instance_id: &'a str,
}

/// Write the SFT JSONL (`{prompt, completion, instance_id}`) plus its sidecar
/// manifest. Preconditions: every record retained, every referenced instance
/// present, and every completion re-extracts to its record's label.
pub fn export_sft(
    records: &[DebiasedRecord],
    instances: &[JudgeInstance],
    template: &PromptTemplate,
    convention: &LabelConvention,
    manifest: &SftTrainManifest,
    out_path: &Path,
) -> Result<FileSummary, ExportError> {
    let by_id: HashMap<&str, &JudgeInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut rows = Vec::with_capacity(records.len());
    for record in records {
        if let Some(reason) = record.drop_reason {
            return Err(ExportError::DroppedRecord {
                id: record.instance_id.clone(),
                reason: format!("{reason:?}").to_lowercase(),
            });
        }
        let label = match record.label {
            Some(label) if label.is_binary() => label,
            _ => return Err(ExportError::MissingLabel { id: record.instance_id.clone() }),
        };
        let instance = by_id
            .get(record.instance_id.as_str())
            .ok_or_else(|| ExportError::MissingInstance { id: record.instance_id.clone() })?;
        if extract_decision(&record.feedback, convention, false) != Some(label) {
            return Err(ExportError::CompletionLabelMismatch { id: record.instance_id.clone(), label });
        }
        let prompt = render_prompt(template, instance, &HashMap::new())?;
        rows.push(SftRow { prompt, completion: &record.feedback, instance_id: &record.instance_id });
    }

    let bytes = to_jsonl_bytes(&rows);
    write_bytes(out_path, &bytes)?;
    let sft_sha256 = sha256_hex(&bytes);

    let sidecar = SftExportManifest {
        training: manifest.clone(),
        record_count: rows.len(),
        sft_sha256: sft_sha256.clone(),
        records_sha256: sha256_hex(&to_jsonl_bytes(records)),
        instances_sha256: sha256_hex(&to_jsonl_bytes(instances)),
    };
    let manifest_path = sidecar_path(out_path);
    let mut manifest_bytes = serde_json::to_vec_pretty(&sidecar).expect("manifest serializes");
    manifest_bytes.push(b'\n');
    write_bytes(&manifest_path, &manifest_bytes)?;

    Ok(FileSummary { path: out_path.to_path_buf(), manifest_path, lines: rows.len(), content_sha256: sft_sha256 })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ExportError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ExportError::Io { path: path.display().to_string(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| ExportError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ComposeMode {
    /// Stage-2 retained records, unchanged.
    Agde,
    /// Teacher and assistant annotations unioned without any filtering;
    /// instance ids are suffixed with the annotator so both copies coexist.
    NaiveMix,
    /// Margin-kept instances with the teacher's original feedback.
    TeacherOnlyMargin,
}

/// Inputs for [`compose_dataset`]; the variant must match the mode.
#[derive(Debug)]
pub enum ComposeSources<'a> {
    Agde {
        records: &'a [DebiasedRecord],
        instances: &'a [JudgeInstance],
    },
    NaiveMix {
        teacher: &'a [Annotation],
        assistant: &'a [Annotation],
        instances: &'a [JudgeInstance],
    },
    TeacherOnlyMargin {
        teacher: &'a [Annotation],
        kept_instances: &'a [JudgeInstance],
    },
}

/// Records plus the (possibly re-keyed) instances they reference, ready for
/// [`export_sft`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedDataset {
    pub records: Vec<DebiasedRecord>,
    pub instances: Vec<JudgeInstance>,
}

fn record_from_annotation(annotation: &Annotation, id: String, label: Label) -> DebiasedRecord {
    DebiasedRecord {
        instance_id: id,
        critique: String::new(),
        feedback: annotation.feedback.clone(),
        decision: Some(label),
        label: Some(label),
        drop_reason: None,
        conflicted: false,
    }
}

/// Build an export-ready dataset for one of the three compositions.
/// Annotations without a binary label never compose (their feedback carries
/// no extractable verdict to train on).
pub fn compose_dataset(mode: ComposeMode, sources: ComposeSources<'_>) -> Result<ComposedDataset, ExportError> {
    match (mode, sources) {
        (ComposeMode::Agde, ComposeSources::Agde { records, instances }) => {
            let by_id: HashMap<&str, &JudgeInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
            let mut retained = Vec::new();
            let mut referenced = Vec::new();
            for record in records.iter().filter(|r| r.is_retained()) {
                let instance = by_id
                    .get(record.instance_id.as_str())
                    .ok_or_else(|| ExportError::MissingInstance { id: record.instance_id.clone() })?;
                retained.push(record.clone());
                referenced.push((*instance).clone());
            }
            Ok(ComposedDataset { records: retained, instances: referenced })
        }
        (ComposeMode::NaiveMix, ComposeSources::NaiveMix { teacher, assistant, instances }) => {
            let by_id: HashMap<&str, &JudgeInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
            let mut records = Vec::new();
            let mut rekeyed = Vec::new();
            for annotation in teacher.iter().chain(assistant.iter()) {
                let Some(label) = annotation.label.filter(|l| l.is_binary()) else { continue };
                let instance = by_id
                    .get(annotation.instance_id.as_str())
                    .ok_or_else(|| ExportError::MissingInstance { id: annotation.instance_id.clone() })?;
                let suffixed = format!("{}#{}", annotation.instance_id, annotation.annotator);
                let mut instance = (*instance).clone();
                instance.id = suffixed.clone();
                records.push(record_from_annotation(annotation, suffixed, label));
                rekeyed.push(instance);
            }
            Ok(ComposedDataset { records, instances: rekeyed })
        }
        (ComposeMode::TeacherOnlyMargin, ComposeSources::TeacherOnlyMargin { teacher, kept_instances }) => {
            let teacher_by_id: HashMap<&str, &Annotation> =
                teacher.iter().map(|a| (a.instance_id.as_str(), a)).collect();
            let mut records = Vec::new();
            let mut referenced = Vec::new();
            for instance in kept_instances {
                let Some(annotation) = teacher_by_id.get(instance.id.as_str()) else { continue };
                let Some(label) = annotation.label.filter(|l| l.is_binary()) else { continue };
                records.push(record_from_annotation(annotation, instance.id.clone(), label));
                referenced.push(instance.clone());
            }
            Ok(ComposedDataset { records, instances: referenced })
        }
        (mode, _) => Err(ExportError::ModeSourceMismatch { mode }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates::TemplateName;

    fn instance(id: &str) -> JudgeInstance {
        JudgeInstance::new(id, format!("question {id}"), format!("left {id}"), format!("right {id}"))
    }

    fn retained_record(id: &str, label: Label) -> DebiasedRecord {
        let marker = if label == Label::First { "Response 1" } else { "Response 2" };
        DebiasedRecord {
            instance_id: id.to_string(),
            critique: "critique".to_string(),
            feedback: format!("Balanced analysis of {id}. So, the final decision is {marker}"),
            decision: Some(label),
            label: Some(label),
            drop_reason: None,
            conflicted: false,
        }
    }

    fn annotation(id: &str, annotator: &str, label: Label) -> Annotation {
        let marker = if label == Label::First { "Response 1" } else { "Response 2" };
        Annotation {
            instance_id: id.to_string(),
            annotator: annotator.to_string(),
            feedback: format!("{annotator} view on {id}. So, the final decision is {marker}"),
            label: Some(label),
            raw: String::new(),
            attempts: 1,
        }
    }

    #[test]
    fn sft_rows_roundtrip_their_labels() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sft.jsonl");
        let instances = vec![instance("a"), instance("b"), instance("c")];
        let records = vec![
            retained_record("a", Label::First),
            retained_record("b", Label::Second),
            retained_record("c", Label::First),
        ];
        let manifest = SftTrainManifest::reference_settings(7);
        let summary = export_sft(
            &records,
            &instances,
            &PromptTemplate::get(TemplateName::AutojJudge),
            &LabelConvention::autoj(),
            &manifest,
            &out,
        )
        .unwrap();
        assert_eq!(summary.lines, 3);

        let text = std::fs::read_to_string(&out).unwrap();
        for (line, record) in text.lines().zip(&records) {
            let row: serde_json::Value = serde_json::from_str(line).unwrap();
            let completion = row["completion"].as_str().unwrap();
            assert_eq!(
                extract_decision(completion, &LabelConvention::autoj(), false),
                record.label,
                "completion must re-extract to its label"
            );
            assert!(row["prompt"].as_str().unwrap().contains("[Query]:"));
        }

        let sidecar: SftExportManifest =
            serde_json::from_str(&std::fs::read_to_string(summary.manifest_path).unwrap()).unwrap();
        assert_eq!(sidecar.training.learning_rate, 1e-5);
        assert_eq!(sidecar.training.epochs, 2);
        assert_eq!(sidecar.training.max_input_length, 2048);
        assert_eq!(sidecar.record_count, 3);
    }

    #[test]
    fn export_rejects_dropped_and_mismatched_records() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sft.jsonl");
        let instances = vec![instance("a")];
        let template = PromptTemplate::get(TemplateName::AutojJudge);
        let convention = LabelConvention::autoj();
        let manifest = SftTrainManifest::reference_settings(0);

        let mut dropped = retained_record("a", Label::First);
        dropped.drop_reason = Some(crate::stage2::DropReason::Tie);
        dropped.label = None;
        let err = export_sft(&[dropped], &instances, &template, &convention, &manifest, &out).unwrap_err();
        assert!(matches!(err, ExportError::DroppedRecord { .. }));

        let mut mismatched = retained_record("a", Label::First);
        mismatched.feedback = "Thorough analysis. So, the final decision is Response 2".to_string();
        let err = export_sft(&[mismatched], &instances, &template, &convention, &manifest, &out).unwrap_err();
        assert!(matches!(err, ExportError::CompletionLabelMismatch { .. }));

        let orphan = retained_record("ghost", Label::First);
        let err = export_sft(&[orphan], &instances, &template, &convention, &manifest, &out).unwrap_err();
        assert!(matches!(err, ExportError::MissingInstance { .. }));
    }

    #[test]
    fn export_hash_is_input_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sft.jsonl");
        let instances = vec![instance("a")];
        let template = PromptTemplate::get(TemplateName::AutojJudge);
        let convention = LabelConvention::autoj();
        let manifest = SftTrainManifest::reference_settings(0);

        let records = vec![retained_record("a", Label::First)];
        let first = export_sft(&records, &instances, &template, &convention, &manifest, &out).unwrap();
        let again = export_sft(&records, &instances, &template, &convention, &manifest, &out).unwrap();
        assert_eq!(first.content_sha256, again.content_sha256);

        let mut perturbed = records.clone();
        perturbed[0].feedback = perturbed[0].feedback.replace("Balanced", "Balancedd");
        let changed = export_sft(&perturbed, &instances, &template, &convention, &manifest, &out).unwrap();
        assert_ne!(first.content_sha256, changed.content_sha256);
    }

    #[test]
    fn naive_mix_unions_both_streams_with_suffixed_ids() {
        let instances: Vec<JudgeInstance> = (0..10).map(|i| instance(&format!("i{i}"))).collect();
        let teacher: Vec<Annotation> =
            instances.iter().map(|i| annotation(&i.id, "teacher", Label::First)).collect();
        let assistant: Vec<Annotation> =
            instances.iter().map(|i| annotation(&i.id, "assistant", Label::Second)).collect();
        let composed = compose_dataset(
            ComposeMode::NaiveMix,
            ComposeSources::NaiveMix { teacher: &teacher, assistant: &assistant, instances: &instances },
        )
        .unwrap();
        assert_eq!(composed.records.len(), 20);
        assert_eq!(composed.instances.len(), 20);
        assert!(composed.records.iter().any(|r| r.instance_id == "i0#teacher"));
        assert!(composed.records.iter().any(|r| r.instance_id == "i0#assistant"));
        // records and instances stay keyed together
        for (record, instance) in composed.records.iter().zip(&composed.instances) {
            assert_eq!(record.instance_id, instance.id);
        }
    }

    #[test]
    fn teacher_only_margin_keeps_original_feedback_on_kept_set() {
        let all: Vec<JudgeInstance> = (0..6).map(|i| instance(&format!("i{i}"))).collect();
        let teacher: Vec<Annotation> = all.iter().map(|i| annotation(&i.id, "teacher", Label::First)).collect();
        let kept = &all[..3];
        let composed = compose_dataset(
            ComposeMode::TeacherOnlyMargin,
            ComposeSources::TeacherOnlyMargin { teacher: &teacher, kept_instances: kept },
        )
        .unwrap();
        assert_eq!(composed.records.len(), 3);
        assert!(composed.records.iter().all(|r| r.feedback.starts_with("teacher view")));
    }

    #[test]
    fn agde_mode_passes_retained_records_through() {
        let instances = vec![instance("a"), instance("b")];
        let mut records = vec![retained_record("a", Label::First), retained_record("b", Label::Second)];
        records[1].drop_reason = Some(crate::stage2::DropReason::Conflict);
        records[1].label = None;
        let composed = compose_dataset(
            ComposeMode::Agde,
            ComposeSources::Agde { records: &records, instances: &instances },
        )
        .unwrap();
        assert_eq!(composed.records.len(), 1);
        assert_eq!(composed.records[0], records[0]);
    }

    #[test]
    fn mode_source_mismatch_is_an_error() {
        let instances = vec![instance("a")];
        let records = vec![retained_record("a", Label::First)];
        let err = compose_dataset(
            ComposeMode::NaiveMix,
            ComposeSources::Agde { records: &records, instances: &instances },
        )
        .unwrap_err();
        assert!(matches!(err, ExportError::ModeSourceMismatch { mode: ComposeMode::NaiveMix }));
    }
}
