//! Subcommand front-end. One subcommand per pipeline stage; every stage reads
//! its declared inputs, writes its declared outputs under the run directory's
//! fixed layout, and appends a hash-chained entry to `manifest.jsonl`. Any
//! stage can resume from the previous stage's files alone.
//!
//! Exit codes: 0 success, 2 usage/configuration errors, 1 runtime errors.

use crate::annotate::annotate_dataset;
use crate::config::{derive_seed, PipelineConfig, Role};
use crate::evalharness::{
    build_bias_subset, compute_accuracy, compute_bias_report, judge_dataset, sweep_csv, threshold_sweep, AccuracyMode,
    BiasReport,
};
use crate::export::{compose_dataset, export_sft, ComposeMode, ComposeSources, SftTrainManifest};
use crate::ingest::{parse_dataset, sample_subset, split_train_val, DatasetDescriptor, SourceFormat};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::manifest::{sha256_file, ManifestRecorder};
use crate::model::{Annotation, JudgeInstance, LabelConvention};
use crate::stage1::{
    build_consensus, build_margin_pairs, compute_margins, export_dpo_pairs, filter_by_margin, histogram_csv,
    margin_stats, DpoTrainManifest, MarginRecord, PreferencePair,
};
use crate::stage2::{debias_instances, DebiasedRecord, Stage2Summary};
use crate::templates::{PromptTemplate, TemplateName};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

/// Fixed artifact names inside the run directory.
pub mod paths {
    pub const INSTANCES: &str = "instances.jsonl";
    pub const INGEST_SUMMARY: &str = "ingest_summary.json";
    pub const CONSENSUS_PAIRS: &str = "consensus_pairs.jsonl";
    pub const MARGIN_PAIRS: &str = "margin_pairs.jsonl";
    pub const CONSENSUS_SUMMARY: &str = "consensus_summary.json";
    pub const DPO_PAIRS: &str = "dpo_pairs.jsonl";
    pub const DPO_PAIRS_TRAIN: &str = "dpo_pairs.train.jsonl";
    pub const DPO_PAIRS_VAL: &str = "dpo_pairs.val.jsonl";
    pub const MARGINS: &str = "margins.jsonl";
    pub const MARGIN_HISTOGRAM: &str = "margin_histogram.csv";
    pub const SCORE_SUMMARY: &str = "score_margins_summary.json";
    pub const KEPT: &str = "kept.jsonl";
    pub const DROPPED: &str = "dropped.jsonl";
    pub const FILTER_SUMMARY: &str = "filter_summary.json";
    pub const DEBIASED: &str = "debiased.jsonl";
    pub const STAGE2_SUMMARY: &str = "stage2_summary.json";
    pub const SFT: &str = "sft.jsonl";
    pub const COMPOSED_RECORDS: &str = "composed_records.jsonl";
    pub const COMPOSED_INSTANCES: &str = "composed_instances.jsonl";
    pub const EVAL_REPORT_JSON: &str = "eval_report.json";
    pub const EVAL_REPORT_CSV: &str = "eval_report.csv";
    pub const BIAS_REPORT: &str = "bias_report.json";
    pub const SWEEP_CSV: &str = "sweep.csv";

    pub fn annotations(role: &str) -> String {
        format!("annotations_{role}.jsonl")
    }

    pub fn annotation_summary(role: &str) -> String {
        format!("annotations_{role}_summary.json")
    }

    pub fn sweep_records(threshold: f64) -> String {
        format!("sweep_records_T{threshold}.jsonl")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AnnotatorRole {
    Teacher,
    Assistant,
    Judge,
}

impl AnnotatorRole {
    fn as_role(self) -> Role {
        match self {
            AnnotatorRole::Teacher => Role::Teacher,
            AnnotatorRole::Assistant => Role::Assistant,
            AnnotatorRole::Judge => Role::Judge,
        }
    }

    fn as_str(self) -> &'static str {
        self.as_role().as_str()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AnchorRole {
    Teacher,
    Assistant,
}

#[derive(Parser, Debug)]
#[command(name = "agde", version, about = "Debiasing pipeline for LLM-as-a-judge training data")]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory all artifacts are read from and written to.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a source dataset into canonical tie-free instances.
    Ingest {
        /// Source dataset file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: SourceFormat,
        /// Model name that counts as the teacher in bias analysis.
        #[arg(long, default_value = "gpt-4")]
        teacher_model: String,
        /// Deterministically subsample to this many instances.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Generate judge annotations for one backend role.
    Annotate {
        #[arg(long, value_enum)]
        role: AnnotatorRole,
        #[arg(long, value_enum, default_value = "autoj_judge")]
        template: TemplateName,
        /// Instance file (default: <run-dir>/instances.jsonl).
        #[arg(long)]
        instances: Option<PathBuf>,
    },
    /// Build consensus pairs and margin pairs from two annotation streams.
    Consensus {
        /// Which stream's labels anchor the margin pairs.
        #[arg(long, value_enum, default_value = "teacher")]
        anchor: AnchorRole,
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        assistant: Option<PathBuf>,
    },
    /// Sample consensus pairs and export the DPO training handoff.
    ExportDpo {
        /// Pair count to sample for training.
        #[arg(long, default_value_t = 1000)]
        sample_count: usize,
        /// Train/validation split ratio.
        #[arg(long, default_value_t = 0.9)]
        split_ratio: f64,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Score margin pairs under the policy and reference scorers.
    ScoreMargins {
        #[arg(long, default_value_t = 1.0)]
        bin_width: f64,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Partition instances by margin threshold.
    Filter {
        /// Margin threshold T (default: config margin_threshold).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long)]
        margins: Option<PathBuf>,
    },
    /// Critique both responses and aggregate with the teacher's feedback.
    CritiqueAggregate {
        /// Feedback-revision prompt strategy.
        #[arg(long, value_enum, default_value = "aggregate")]
        strategy: TemplateName,
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long)]
        teacher_annotations: Option<PathBuf>,
    },
    /// Export the fine-tune dataset and its manifest.
    ExportSft {
        #[arg(long, value_enum, default_value = "autoj_judge")]
        template: TemplateName,
        /// Record file (default: <run-dir>/debiased.jsonl, retained records only).
        #[arg(long)]
        records: Option<PathBuf>,
        /// Instance file (default: <run-dir>/kept.jsonl, or composed_instances.jsonl with --records).
        #[arg(long)]
        instances: Option<PathBuf>,
    },
    /// Compose a baseline dataset ready for export-sft.
    Compose {
        #[arg(long, value_enum)]
        mode: ComposeMode,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        teacher_annotations: Option<PathBuf>,
        #[arg(long)]
        assistant_annotations: Option<PathBuf>,
        #[arg(long)]
        instances: Option<PathBuf>,
    },
    /// Judge benchmarks and report accuracy.
    Eval {
        /// Benchmark file(s) in canonical instance JSONL; repeatable.
        #[arg(long, required = true)]
        benchmark: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "parsed_only")]
        mode: AccuracyMode,
        #[arg(long, value_enum, default_value = "autoj_judge")]
        template: TemplateName,
    },
    /// Quantify teacher preference bias on a benchmark.
    BiasReport {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long, default_value = "gpt-4")]
        teacher_model: String,
        /// Reuse existing judge annotations instead of judging live.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "autoj_judge")]
        template: TemplateName,
    },
    /// Sweep margin thresholds and tabulate kept counts and accuracy.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0,5,10")]
        thresholds: Vec<f64>,
        #[arg(long, required = true)]
        benchmark: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "autoj_judge")]
        template: TemplateName,
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long)]
        margins: Option<PathBuf>,
        #[arg(long)]
        teacher_annotations: Option<PathBuf>,
    },
}

struct Ctx {
    config: PipelineConfig,
    config_sha256: String,
    run_dir: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli, required_roles: &[Role]) -> Result<Self, CliError> {
        let config_path = cli
            .config
            .as_ref()
            .ok_or_else(|| CliError::Usage("--config is required".to_string()))?;
        let config = PipelineConfig::load(config_path).map_err(|e| CliError::Usage(e.to_string()))?;
        let violations = config.validate(required_roles);
        if !violations.is_empty() {
            let listed = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            return Err(CliError::Usage(format!("config schema violations: {listed}")));
        }
        let config_sha256 = sha256_file(config_path).map_err(runtime)?;
        std::fs::create_dir_all(&cli.run_dir).map_err(runtime)?;
        Ok(Ctx { config, config_sha256, run_dir: cli.run_dir.clone() })
    }

    fn recorder(&self, command: &str) -> ManifestRecorder {
        ManifestRecorder::start(command, self.config.seed, self.config_sha256.clone(), &self.run_dir)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn resolve(&self, explicit: &Option<PathBuf>, default_name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.path(default_name))
    }

    fn read_instances(&self, recorder: &mut ManifestRecorder, path: &Path) -> Result<Vec<JudgeInstance>, CliError> {
        recorder.record_input(path).map_err(|e| missing_input(path, e))?;
        read_jsonl(path).map_err(runtime)
    }

    fn read_annotations(&self, recorder: &mut ManifestRecorder, path: &Path) -> Result<Vec<Annotation>, CliError> {
        recorder.record_input(path).map_err(|e| missing_input(path, e))?;
        read_jsonl(path).map_err(runtime)
    }
}

fn missing_input(path: &Path, err: std::io::Error) -> CliError {
    if err.kind() == std::io::ErrorKind::NotFound {
        CliError::Usage(format!("input file {} does not exist", path.display()))
    } else {
        runtime(format!("cannot read {}: {err}", path.display()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Parse `args` and run the selected subcommand. Separated from `main` so
/// integration tests can drive the full CLI in-process.
pub async fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) if err.use_stderr() => return Err(CliError::Usage(err.to_string())),
        Err(err) => {
            // --help / --version
            print!("{err}");
            return Ok(());
        }
    };

    match &cli.command {
        Command::Ingest { input, format, teacher_model, sample } => {
            let ctx = Ctx::new(&cli, &[])?;
            let mut recorder = ctx.recorder("ingest");
            recorder.record_input(input).map_err(|e| missing_input(input, e))?;
            let descriptor =
                DatasetDescriptor { path: input.clone(), format: *format, teacher_model_name: teacher_model.clone() };
            let (mut instances, summary) =
                parse_dataset(&descriptor, ctx.config.malformed_tolerance).map_err(runtime)?;
            if let Some(n) = sample {
                instances = sample_subset(&instances, *n, derive_seed(ctx.config.seed, "ingest.sample"));
                instances.sort_by(|a, b| a.id.cmp(&b.id));
            }
            let out = ctx.path(paths::INSTANCES);
            write_jsonl(&out, &instances).map_err(runtime)?;
            let summary_path = ctx.path(paths::INGEST_SUMMARY);
            write_json(&summary_path, &summary)?;
            recorder.record_output(&out).map_err(runtime)?;
            recorder.record_output(&summary_path).map_err(runtime)?;
            recorder.finish().map_err(runtime)?;
            println!(
                "ingest: read {} kept {} (ties dropped {}, malformed {})",
                summary.read, summary.kept, summary.ties_dropped, summary.malformed
            );
        }

        Command::Annotate { role, template, instances } => {
            let ctx = Ctx::new(&cli, &[role.as_role()])?;
            let mut recorder = ctx.recorder("annotate");
            let instances_path = ctx.resolve(instances, paths::INSTANCES);
            let instances = ctx.read_instances(&mut recorder, &instances_path)?;
            let backend = ctx.config.build_backend(role.as_role()).map_err(runtime)?;
            let convention = convention_for(*template);
            let run = annotate_dataset(
                backend.as_ref(),
                &instances,
                &PromptTemplate::get(*template),
                &convention,
                &ctx.config.sampling,
                &ctx.config,
                role.as_str(),
            )
            .await;
            let out = ctx.path(&paths::annotations(role.as_str()));
            write_jsonl(&out, &run.annotations).map_err(runtime)?;
            let summary = serde_json::json!({
                "role": role.as_str(),
                "instances": instances.len(),
                "annotated": run.annotations.len(),
                "unparsed": run.unparsed_count(),
                "failed": run.failures.iter().map(|(id, e)| serde_json::json!({"id": id, "error": e.to_string()})).collect::<Vec<_>>(),
            });
            let summary_path = ctx.path(&paths::annotation_summary(role.as_str()));
            write_json(&summary_path, &summary)?;
            recorder.record_output(&out).map_err(runtime)?;
            recorder.record_output(&summary_path).map_err(runtime)?;
            recorder.finish().map_err(runtime)?;
            println!(
                "annotate[{}]: {} annotations ({} unparsed, {} failed)",
                role.as_str(),
                run.annotations.len(),
                run.unparsed_count(),
                run.failures.len()
            );
        }

        Command::Consensus { anchor, instances, teacher, assistant } => {
            let ctx = Ctx::new(&cli, &[])?;
            let mut recorder = ctx.recorder("consensus");
            let instances = ctx.read_instances(&mut recorder, &ctx.resolve(instances, paths::INSTANCES))?;
            let teacher_path = ctx.resolve(teacher, &paths::annotations(Role::Teacher.as_str()));
            let assistant_path = ctx.resolve(assistant, &paths::annotations(Role::Assistant.as_str()));
            let teacher = ctx.read_annotations(&mut recorder, &teacher_path)?;
            let assistant = ctx.read_annotations(&mut recorder, &assistant_path)?;

            let consensus = build_consensus(&teacher, &assistant, &instances).map_err(runtime)?;
            let (anchor_ann, other_ann) = match anchor {
                AnchorRole::Teacher => (&teacher, &assistant),
                AnchorRole::Assistant => (&assistant, &teacher),
            };
            let margin_pairs = build_margin_pairs(anchor_ann, other_ann, &instances).map_err(runtime)?;

            let consensus_path = ctx.path(paths::CONSENSUS_PAIRS);
            let margin_path = ctx.path(paths::MARGIN_PAIRS);
            write_jsonl(&consensus_path, &consensus).map_err(runtime)?;
            write_jsonl(&margin_path, &margin_pairs).map_err(runtime)?;
            let summary = serde_json::json!({
                "instances": instances.len(),
                "consensus_pairs": consensus.len(),
                "margin_pairs": margin_pairs.len(),
                "anchor": match anchor { AnchorRole::Teacher => "teacher", AnchorRole::Assistant => "assistant" },
            });
            let summary_path = ctx.path(paths::CONSENSUS_SUMMARY);
            write_json(&summary_path, &summary)?;
            for path in [&consensus_path, &margin_path, &summary_path] {
                recorder.record_output(path).map_err(runtime)?;
            }
            recorder.finish().map_err(runtime)?;
            println!("consensus: {} consensus pairs, {} margin pairs", consensus.len(), margin_pairs.len());
        }

        Command::ExportDpo { sample_count, split_ratio, pairs } => {
            let ctx = Ctx::new(&cli, &[])?;
            let mut recorder = ctx.recorder("export-dpo");
            let pairs_path = ctx.resolve(pairs, paths::CONSENSUS_PAIRS);
            recorder.record_input(&pairs_path).map_err(|e| missing_input(&pairs_path, e))?;
            let all_pairs: Vec<PreferencePair> = read_jsonl(&pairs_path).map_err(runtime)?;
            let mut sampled =
                sample_subset(&all_pairs, *sample_count, derive_seed(ctx.config.seed, "stage1.dpo_sample"));
            sampled.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
            let manifest = DpoTrainManifest {
                train_val_ratio: *split_ratio,
                ..DpoTrainManifest::reference_settings(sampled.len(), ctx.config.seed)
            };
            let out = ctx.path(paths::DPO_PAIRS);
            let summary = export_dpo_pairs(&sampled, &manifest, &out).map_err(runtime)?;
            let (train, val) =
                split_train_val(&sampled, *split_ratio, derive_seed(ctx.config.seed, "stage1.dpo_split"))
                    .map_err(runtime)?;
            let train_path = ctx.path(paths::DPO_PAIRS_TRAIN);
            let val_path = ctx.path(paths::DPO_PAIRS_VAL);
            write_jsonl(&train_path, &train).map_err(runtime)?;
            write_jsonl(&val_path, &val).map_err(runtime)?;
            for path in [&out, &summary.manifest_path, &train_path, &val_path] {
                recorder.record_output(path).map_err(runtime)?;
            }
            recorder.finish().map_err(runtime)?;
            println!(
                "export-dpo: {} pairs ({} train / {} val), sha256 {}",
                summary.lines,
                train.len(),
                val.len(),
                summary.content_sha256
            );
        }

        Command::ScoreMargins { bin_width, pairs } => {
            let ctx = Ctx::new(&cli, &[Role::PolicyScorer, Role::ReferenceScorer])?;
            let mut recorder = ctx.recorder("score-margins");
            let pairs_path = ctx.resolve(pairs, paths::MARGIN_PAIRS);
            recorder.record_input(&pairs_path).map_err(|e| missing_input(&pairs_path, e))?;
            let pairs: Vec<PreferencePair> = read_jsonl(&pairs_path).map_err(runtime)?;
            let policy = ctx.config.build_backend(Role::PolicyScorer).map_err(runtime)?;
            let reference = ctx.config.build_backend(Role::ReferenceScorer).map_err(runtime)?;
            let outcomes = compute_margins(policy.as_ref(), reference.as_ref(), &pairs, ctx.config.concurrency).await;

            let mut records = Vec::new();
            let mut failures = Vec::new();
            for outcome in outcomes {
                match outcome.result {
                    Ok(record) => records.push(record),
                    Err(error) => failures.push(serde_json::json!({"id": outcome.id, "error": error.to_string()})),
                }
            }
            let margins_path = ctx.path(paths::MARGINS);
            write_jsonl(&margins_path, &records).map_err(runtime)?;
            let values: Vec<f64> = records.iter().map(|r| r.margin).collect();
            let stats = margin_stats(&values, *bin_width).map_err(runtime)?;
            let histogram_path = ctx.path(paths::MARGIN_HISTOGRAM);
            write_text(&histogram_path, &histogram_csv(&stats))?;
            let summary = serde_json::json!({
                "pairs": pairs.len(),
                "scored": records.len(),
                "failed": failures,
                "summary": stats.summary,
            });
            let summary_path = ctx.path(paths::SCORE_SUMMARY);
            write_json(&summary_path, &summary)?;
            for path in [&margins_path, &histogram_path, &summary_path] {
                recorder.record_output(path).map_err(runtime)?;
            }
            recorder.finish().map_err(runtime)?;
            println!("score-margins: scored {} of {} pairs", records.len(), pairs.len());
        }

        Command::Filter { threshold, instances, margins } => {
            let ctx = Ctx::new(&cli, &[])?;
            let mut recorder = ctx.recorder("filter");
            let threshold = threshold.unwrap_or(ctx.config.margin_threshold);
            let instances = ctx.read_instances(&mut recorder, &ctx.resolve(instances, paths::INSTANCES))?;
            let margins_path = ctx.resolve(margins, paths::MARGINS);
            recorder.record_input(&margins_path).map_err(|e| missing_input(&margins_path, e))?;
            let margins: Vec<MarginRecord> = read_jsonl(&margins_path).map_err(runtime)?;
            let (kept, dropped) = filter_by_margin(&instances, &margins, threshold).map_err(runtime)?;
            let kept_path = ctx.path(paths::KEPT);
            let dropped_path = ctx.path(paths::DROPPED);
            write_jsonl(&kept_path, &kept).map_err(runtime)?;
            write_jsonl(&dropped_path, &dropped).map_err(runtime)?;
            let summary = serde_json::json!({
                "threshold": threshold,
                "input": instances.len(),
                "kept": kept.len(),
                "dropped": dropped.len(),
            });
            let summary_path = ctx.path(paths::FILTER_SUMMARY);
            write_json(&summary_path, &summary)?;
            for path in [&kept_path, &dropped_path, &summary_path] {
                recorder.record_output(path).map_err(runtime)?;
            }
            recorder.finish().map_err(runtime)?;
            println!("filter: T={threshold} kept {} dropped {}", kept.len(), dropped.len());
        }

        Command::CritiqueAggregate { strategy, instances, teacher_annotations } => {
            if !matches!(strategy, TemplateName::Aggregate | TemplateName::NaiveConcat | TemplateName::Rephrase) {
                return Err(CliError::Usage(format!(
                    "--strategy must be aggregate, naive_concat, or rephrase, got {}",
                    strategy.as_str()
                )));
            }
            let ctx = Ctx::new(&cli, &[Role::Assistant])?;
            let mut recorder = ctx.recorder("critique-aggregate");
            let instances = ctx.read_instances(&mut recorder, &ctx.resolve(instances, paths::KEPT))?;
            let teacher_path = ctx.resolve(teacher_annotations, &paths::annotations(Role::Teacher.as_str()));
            let teacher = ctx.read_annotations(&mut recorder, &teacher_path)?;
            let assistant = ctx.config.build_backend(Role::Assistant).map_err(runtime)?;
            let (records, summary, failures) =
                debias_instances(assistant.as_ref(), &instances, &teacher, &ctx.config, *strategy)
                    .await
                    .map_err(runtime)?;
            let out = ctx.path(paths::DEBIASED);
            write_jsonl(&out, &records).map_err(runtime)?;
            let summary_path = ctx.path(paths::STAGE2_SUMMARY);
            write_json(&summary_path, &Stage2SummaryReport::new(summary, &failures))?;
            recorder.record_output(&out).map_err(runtime)?;
            recorder.record_output(&summary_path).map_err(runtime)?;
            recorder.finish().map_err(runtime)?;
            println!(
                "critique-aggregate: {} exported, {} tie, {} conflict, {} unparseable",
                summary.exported, summary.dropped_tie, summary.dropped_conflict, summary.dropped_unparseable
            );
        }

        Command::ExportSft { template, records, instances } => {
            let ctx = Ctx::new(&cli, &[])?;
            let mut recorder = ctx.recorder("export-sft");
            let (records, instances) = if let Some(records_path) = records {
                recorder.record_input(records_path).map_err(|e| missing_input(records_path, e))?;
                let records: Vec<DebiasedRecord> = read_jsonl(records_path).map_err(runtime)?;
                let instances_path = ctx.resolve(instances, paths::COMPOSED_INSTANCES);
                let instances = ctx.read_instances(&mut recorder, &instances_path)?;
                (records, instances)
            } else {
                let debiased_path = ctx.path(paths::DEBIASED);
                recorder.record_input(&debiased_path).map_err(|e| missing_input(&debiased_path, e))?;
                let all: Vec<DebiasedRecord> = read_jsonl(&debiased_path).map_err(runtime)?;
                let retained = all.into_iter().filter(|r| r.is_retained()).collect::<Vec<_>>();
                let instances_path = ctx.resolve(instances, paths::KEPT);
                let instances = ctx.read_instances(&mut recorder, &instances_path)?;
                (retained, instances)
            };
            let convention = convention_for(*template);
            let manifest = SftTrainManifest::reference_settings(ctx.config.seed);
            let out = ctx.path(paths::SFT);
            let summary =
                export_sft(&records, &instances, &PromptTemplate::get(*template), &convention, &manifest, &out)
                    .map_err(runtime)?;
            recorder.record_output(&out).map_err(runtime)?;
            recorder.record_output(&summary.manifest_path).map_err(runtime)?;
            recorder.finish().map_err(runtime)?;
            println!("export-sft: {} rows, sha256 {}", summary.lines, summary.content_sha256);
        }

        Command::Compose { mode, records, teacher_annotations, assistant_annotations, instances } => {
            let ctx = Ctx::new(&cli, &[])?;
            let mut recorder = ctx.recorder("compose");
            let composed = match mode {
                ComposeMode::Agde => {
                    let records_path = ctx.resolve(records, paths::DEBIASED);
                    recorder.record_input(&records_path).map_err(|e| missing_input(&records_path, e))?;
                    let records: Vec<DebiasedRecord> = read_jsonl(&records_path).map_err(runtime)?;
                    let instances = ctx.read_instances(&mut recorder, &ctx.resolve(instances, paths::KEPT))?;
                    compose_dataset(*mode, ComposeSources::Agde { records: &records, instances: &instances })
                        .map_err(runtime)?
                }
                ComposeMode::NaiveMix => {
                    let teacher_path = ctx.resolve(teacher_annotations, &paths::annotations(Role::Teacher.as_str()));
                    let assistant_path =
                        ctx.resolve(assistant_annotations, &paths::annotations(Role::Assistant.as_str()));
                    let teacher = ctx.read_annotations(&mut recorder, &teacher_path)?;
                    let assistant = ctx.read_annotations(&mut recorder, &assistant_path)?;
                    let instances = ctx.read_instances(&mut recorder, &ctx.resolve(instances, paths::INSTANCES))?;
                    compose_dataset(
                        *mode,
                        ComposeSources::NaiveMix { teacher: &teacher, assistant: &assistant, instances: &instances },
                    )
                    .map_err(runtime)?
                }
                ComposeMode::TeacherOnlyMargin => {
                    let teacher_path = ctx.resolve(teacher_annotations, &paths::annotations(Role::Teacher.as_str()));
                    let teacher = ctx.read_annotations(&mut recorder, &teacher_path)?;
                    let kept = ctx.read_instances(&mut recorder, &ctx.resolve(instances, paths::KEPT))?;
                    compose_dataset(*mode, ComposeSources::TeacherOnlyMargin { teacher: &teacher, kept_instances: &kept })
                        .map_err(runtime)?
                }
            };
            let records_path = ctx.path(paths::COMPOSED_RECORDS);
            let instances_path = ctx.path(paths::COMPOSED_INSTANCES);
            write_jsonl(&records_path, &composed.records).map_err(runtime)?;
            write_jsonl(&instances_path, &composed.instances).map_err(runtime)?;
            recorder.record_output(&records_path).map_err(runtime)?;
            recorder.record_output(&instances_path).map_err(runtime)?;
            recorder.finish().map_err(runtime)?;
            println!("compose[{mode:?}]: {} records", composed.records.len());
        }

        Command::Eval { benchmark, mode, template } => {
            let ctx = Ctx::new(&cli, &[Role::Judge])?;
            let mut recorder = ctx.recorder("eval");
            let judge = ctx.config.build_backend(Role::Judge).map_err(runtime)?;
            let convention = convention_for(*template);
            let mut rows = Vec::new();
            for path in benchmark {
                let name = benchmark_name(path);
                let instances = ctx.read_instances(&mut recorder, path)?;
                let run = judge_dataset(
                    judge.as_ref(),
                    &instances,
                    &PromptTemplate::get(*template),
                    &convention,
                    &ctx.config.sampling,
                    &ctx.config,
                )
                .await
                .map_err(runtime)?;
                let annotations_path = ctx.path(&paths::annotations(&format!("judge_{name}")));
                write_jsonl(&annotations_path, &run.annotations).map_err(runtime)?;
                recorder.record_output(&annotations_path).map_err(runtime)?;
                let accuracy = compute_accuracy(&run.annotations, &instances, *mode).map_err(runtime)?;
                rows.push(serde_json::json!({
                    "benchmark": name,
                    "accuracy": accuracy,
                    "n": instances.len(),
                    "unparsed": run.unparsed_count(),
                    "mode": match mode { AccuracyMode::ParsedOnly => "parsed_only", AccuracyMode::Strict => "strict" },
                }));
            }
            let json_path = ctx.path(paths::EVAL_REPORT_JSON);
            write_json(&json_path, &rows)?;
            let mut csv = String::from("benchmark,accuracy,n,unparsed,mode\n");
            for row in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row["benchmark"].as_str().unwrap(),
                    row["accuracy"],
                    row["n"],
                    row["unparsed"],
                    row["mode"].as_str().unwrap(),
                ));
            }
            let csv_path = ctx.path(paths::EVAL_REPORT_CSV);
            write_text(&csv_path, &csv)?;
            recorder.record_output(&json_path).map_err(runtime)?;
            recorder.record_output(&csv_path).map_err(runtime)?;
            recorder.finish().map_err(runtime)?;
            for row in &rows {
                println!("eval[{}]: accuracy {}", row["benchmark"].as_str().unwrap(), row["accuracy"]);
            }
        }

        Command::BiasReport { benchmark, teacher_model, annotations, template } => {
            let required: &[Role] = if annotations.is_some() { &[] } else { &[Role::Judge] };
            let ctx = Ctx::new(&cli, required)?;
            let mut recorder = ctx.recorder("bias-report");
            let instances = ctx.read_instances(&mut recorder, benchmark)?;
            let subset = build_bias_subset(&instances, teacher_model);
            if subset.items.is_empty() {
                return Err(CliError::Runtime(format!(
                    "no instance has exactly one response from {teacher_model:?}; nothing to report"
                )));
            }
            let subset_instances: Vec<JudgeInstance> =
                subset.items.iter().map(|item| item.instance.clone()).collect();
            let judge_annotations = match annotations {
                Some(path) => {
                    let all = ctx.read_annotations(&mut recorder, path)?;
                    let ids: std::collections::HashSet<&str> =
                        subset_instances.iter().map(|i| i.id.as_str()).collect();
                    all.into_iter().filter(|a| ids.contains(a.instance_id.as_str())).collect::<Vec<_>>()
                }
                None => {
                    let judge = ctx.config.build_backend(Role::Judge).map_err(runtime)?;
                    let convention = convention_for(*template);
                    judge_dataset(
                        judge.as_ref(),
                        &subset_instances,
                        &PromptTemplate::get(*template),
                        &convention,
                        &ctx.config.sampling,
                        &ctx.config,
                    )
                    .await
                    .map_err(runtime)?
                    .annotations
                }
            };
            let report = compute_bias_report(
                &judge_annotations,
                &subset.items,
                ctx.config.bootstrap_resamples,
                derive_seed(ctx.config.seed, "eval.bootstrap"),
                ctx.config.bias_flag_threshold,
            )
            .map_err(runtime)?;
            let wrapped = BiasReportFile {
                teacher_model: teacher_model.clone(),
                subset_size: subset.items.len(),
                excluded: subset.excluded.len(),
                report,
            };
            let out = ctx.path(paths::BIAS_REPORT);
            write_json(&out, &wrapped)?;
            recorder.record_output(&out).map_err(runtime)?;
            recorder.finish().map_err(runtime)?;
            println!(
                "bias-report: judge {:.3} vs reference {:.3}, delta {:+.3}{}",
                wrapped.report.judge_teacher_win_rate,
                wrapped.report.reference_teacher_win_rate,
                wrapped.report.bias_delta,
                if wrapped.report.biased { " (flagged)" } else { "" }
            );
        }

        Command::Sweep { thresholds, benchmark, template, instances, margins, teacher_annotations } => {
            let ctx = Ctx::new(&cli, &[Role::Judge])?;
            let mut recorder = ctx.recorder("sweep");
            let train_instances = ctx.read_instances(&mut recorder, &ctx.resolve(instances, paths::INSTANCES))?;
            let margins_path = ctx.resolve(margins, paths::MARGINS);
            recorder.record_input(&margins_path).map_err(|e| missing_input(&margins_path, e))?;
            let margins: Vec<MarginRecord> = read_jsonl(&margins_path).map_err(runtime)?;
            let teacher_path = ctx.resolve(teacher_annotations, &paths::annotations(Role::Teacher.as_str()));
            let teacher = ctx.read_annotations(&mut recorder, &teacher_path)?;

            let mut benchmarks = Vec::new();
            for path in benchmark {
                let instances = ctx.read_instances(&mut recorder, path)?;
                benchmarks.push((benchmark_name(path), instances));
            }

            let judge = ctx.config.build_backend(Role::Judge).map_err(runtime)?;
            let convention = convention_for(*template);
            let rows = threshold_sweep(
                judge.as_ref(),
                &train_instances,
                &margins,
                thresholds,
                &benchmarks,
                &PromptTemplate::get(*template),
                &convention,
                &ctx.config,
            )
            .await
            .map_err(runtime)?;

            // per-threshold composed training sets, the artifacts an external
            // trainer would consume at each T
            for &threshold in thresholds {
                let (kept, _) = filter_by_margin(&train_instances, &margins, threshold).map_err(runtime)?;
                let composed = compose_dataset(
                    ComposeMode::TeacherOnlyMargin,
                    ComposeSources::TeacherOnlyMargin { teacher: &teacher, kept_instances: &kept },
                )
                .map_err(runtime)?;
                let path = ctx.path(&paths::sweep_records(threshold));
                write_jsonl(&path, &composed.records).map_err(runtime)?;
                recorder.record_output(&path).map_err(runtime)?;
            }

            let csv_path = ctx.path(paths::SWEEP_CSV);
            write_text(&csv_path, &sweep_csv(&rows))?;
            recorder.record_output(&csv_path).map_err(runtime)?;
            recorder.finish().map_err(runtime)?;
            println!("sweep: {} rows over {} thresholds", rows.len(), thresholds.len());
        }
    }
    Ok(())
}

/// Judge templates imply their decision convention.
fn convention_for(template: TemplateName) -> LabelConvention {
    match template {
        TemplateName::PrefCollectionJudge => LabelConvention::result_ab(),
        _ => LabelConvention::autoj(),
    }
}

fn benchmark_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "benchmark".to_string())
}

#[derive(Serialize)]
struct BiasReportFile {
    teacher_model: String,
    subset_size: usize,
    excluded: usize,
    report: BiasReport,
}

#[derive(Serialize)]
struct Stage2SummaryReport {
    #[serde(flatten)]
    summary: Stage2Summary,
    failures: Vec<serde_json::Value>,
}

impl Stage2SummaryReport {
    fn new(summary: Stage2Summary, failures: &[(String, crate::stage2::Stage2Error)]) -> Self {
        Stage2SummaryReport {
            summary,
            failures: failures
                .iter()
                .map(|(id, e)| serde_json::json!({"id": id, "error": e.to_string()}))
                .collect(),
        }
    }
}
