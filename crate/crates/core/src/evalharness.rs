//! Benchmark evaluation and teacher-preference-bias quantification.
//!
//! Accuracy is judged-label agreement with reference labels. The bias report
//! compares how often the judge picks the teacher-sourced response against
//! how often the reference labels do; the gap is the bias delta. All rates
//! use the parsed annotations as denominator, with the unparsed count always
//! reported alongside. Response order is taken as given in the benchmark
//! files; no position-swapping augmentation is applied, so position bias is a
//! declared confound of these numbers, not something they correct for.

use crate::annotate::{annotate_dataset, AnnotateRun};
use crate::backend::{Backend, GenerationParams};
use crate::config::PipelineConfig;
use crate::model::{Annotation, JudgeInstance, Label, LabelConvention};
use crate::stage1::{filter_by_margin, MarginRecord, Stage1Error};
use crate::templates::PromptTemplate;
use rand::rngs::StdRng;
use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("instance {id:?} has no reference label")]
    MissingReferenceLabel { id: String },
    #[error("annotation references instance {id:?} outside the evaluation set")]
    UnknownInstance { id: String },
    #[error("no parsed annotations; the requested rate is undefined")]
    UndefinedRate,
    #[error("instances must be tie-free for judging; instance {id:?} is labeled tie")]
    TieInstance { id: String },
    #[error(transparent)]
    Stage1(#[from] Stage1Error),
}

/// How unparsed judge outputs enter the accuracy denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Unparsed outputs are excluded from the denominator (default; the
    /// unparsed count is always reported separately).
    ParsedOnly,
    /// Unparsed outputs count as wrong.
    Strict,
}

/// Run the judge backend over a tie-free benchmark under the bounded-retry
/// protocol. Thin wrapper over dataset annotation that enforces the tie-free
/// precondition.
pub async fn judge_dataset(
    judge: &dyn Backend,
    instances: &[JudgeInstance],
    template: &PromptTemplate,
    convention: &LabelConvention,
    params: &GenerationParams,
    config: &PipelineConfig,
) -> Result<AnnotateRun, EvalError> {
    for instance in instances {
        if instance.reference_label == Some(Label::Tie) {
            return Err(EvalError::TieInstance { id: instance.id.clone() });
        }
    }
    Ok(annotate_dataset(judge, instances, template, convention, params, config, "judge").await)
}

/// Fraction of judged labels equal to reference labels under the chosen
/// denominator mode. Every instance must carry a reference label.
pub fn compute_accuracy(
    annotations: &[Annotation],
    instances: &[JudgeInstance],
    mode: AccuracyMode,
) -> Result<f64, EvalError> {
    let mut references = HashMap::new();
    for instance in instances {
        let label = instance
            .reference_label
            .ok_or_else(|| EvalError::MissingReferenceLabel { id: instance.id.clone() })?;
        references.insert(instance.id.as_str(), label);
    }
    let mut parsed = 0usize;
    let mut correct = 0usize;
    let mut total = 0usize;
    for annotation in annotations {
        let reference = references
            .get(annotation.instance_id.as_str())
            .ok_or_else(|| EvalError::UnknownInstance { id: annotation.instance_id.clone() })?;
        total += 1;
        if let Some(label) = annotation.label {
            parsed += 1;
            if label == *reference {
                correct += 1;
            }
        }
    }
    let denominator = match mode {
        AccuracyMode::ParsedOnly => parsed,
        AccuracyMode::Strict => total,
    };
    if denominator == 0 {
        return Err(EvalError::UndefinedRate);
    }
    Ok(correct as f64 / denominator as f64)
}

/// One bias-subset item: an instance where exactly one response came from the
/// teacher model, plus which index that is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasInstance {
    pub instance: JudgeInstance,
    pub teacher_index: usize,
}

/// Exhaustive partition of the input into the bias subset and the excluded
/// remainder (no sources, or the teacher on both/neither side).
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSubset {
    pub items: Vec<BiasInstance>,
    pub excluded: Vec<JudgeInstance>,
}

pub fn build_bias_subset(instances: &[JudgeInstance], teacher_model: &str) -> BiasSubset {
    let mut items = Vec::new();
    let mut excluded = Vec::new();
    for instance in instances {
        let Some(sources) = &instance.response_sources else {
            excluded.push(instance.clone());
            continue;
        };
        let from_teacher: Vec<usize> =
            (0..2).filter(|&i| sources[i] == teacher_model).collect();
        match from_teacher.as_slice() {
            [index] => items.push(BiasInstance { instance: instance.clone(), teacher_index: *index }),
            _ => excluded.push(instance.clone()),
        }
    }
    BiasSubset { items, excluded }
}

/// Teacher win rates under the judge and under the reference labels, their
/// gap, and agreement accuracy, all over parsed annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub n: usize,
    pub parsed: usize,
    pub unparsed: usize,
    pub judge_teacher_win_rate: f64,
    pub reference_teacher_win_rate: f64,
    pub bias_delta: f64,
    pub agreement_accuracy: f64,
    pub delta_ci_low: f64,
    pub delta_ci_high: f64,
    pub bootstrap_resamples: usize,
    pub flag_threshold: f64,
    /// True when the delta exceeds the configured flag threshold.
    pub biased: bool,
}

/// Compute the bias report over a subset with known teacher indices.
///
/// Every annotation must belong to the subset and every subset instance must
/// carry a reference label. The bootstrap confidence interval resamples
/// parsed items with replacement, seeded for reproducibility.
pub fn compute_bias_report(
    annotations: &[Annotation],
    subset: &[BiasInstance],
    resamples: usize,
    seed: u64,
    flag_threshold: f64,
) -> Result<BiasReport, EvalError> {
    let by_id: HashMap<&str, &BiasInstance> =
        subset.iter().map(|item| (item.instance.id.as_str(), item)).collect();

    // (judge == teacher, reference == teacher, judge == reference) per parsed item
    let mut parsed_items: Vec<(bool, bool, bool)> = Vec::new();
    let mut unparsed = 0usize;
    for annotation in annotations {
        let item = by_id
            .get(annotation.instance_id.as_str())
            .ok_or_else(|| EvalError::UnknownInstance { id: annotation.instance_id.clone() })?;
        let reference = item
            .instance
            .reference_label
            .ok_or_else(|| EvalError::MissingReferenceLabel { id: item.instance.id.clone() })?;
        let Some(judged) = annotation.label else {
            unparsed += 1;
            continue;
        };
        let teacher_label = Label::from_response_index(item.teacher_index).expect("index is 0 or 1");
        parsed_items.push((judged == teacher_label, reference == teacher_label, judged == reference));
    }

    if parsed_items.is_empty() {
        return Err(EvalError::UndefinedRate);
    }
    let parsed = parsed_items.len();
    let rate = |f: &dyn Fn(&(bool, bool, bool)) -> bool| {
        parsed_items.iter().filter(|item| f(item)).count() as f64 / parsed as f64
    };
    let judge_rate = rate(&|item| item.0);
    let reference_rate = rate(&|item| item.1);
    let agreement = rate(&|item| item.2);
    let delta = judge_rate - reference_rate;

    let (ci_low, ci_high) = bootstrap_delta_ci(&parsed_items, resamples, seed, delta);

    Ok(BiasReport {
        n: parsed + unparsed,
        parsed,
        unparsed,
        judge_teacher_win_rate: judge_rate,
        reference_teacher_win_rate: reference_rate,
        bias_delta: delta,
        agreement_accuracy: agreement,
        delta_ci_low: ci_low,
        delta_ci_high: ci_high,
        bootstrap_resamples: resamples,
        flag_threshold,
        biased: delta > flag_threshold,
    })
}

/// Percentile bootstrap (2.5%, 97.5%) of the delta over resampled items.
fn bootstrap_delta_ci(items: &[(bool, bool, bool)], resamples: usize, seed: u64, point: f64) -> (f64, f64) {
    if resamples == 0 || items.len() < 2 {
        return (point, point);
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut deltas = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut judge_hits = 0usize;
        let mut reference_hits = 0usize;
        for _ in 0..items.len() {
            let item = items[rng.gen_range(0..items.len())];
            judge_hits += item.0 as usize;
            reference_hits += item.1 as usize;
        }
        deltas.push((judge_hits as f64 - reference_hits as f64) / items.len() as f64);
    }
    deltas.sort_by(|a, b| a.total_cmp(b));
    let low_index = ((resamples as f64) * 0.025).floor() as usize;
    let high_index = (((resamples as f64) * 0.975).ceil() as usize).saturating_sub(1);
    (deltas[low_index.min(resamples - 1)], deltas[high_index.min(resamples - 1)])
}

/// One row of the sweep table: a threshold, what it keeps, and the judge's
/// accuracy on one benchmark. Accuracy is null when the kept set is empty,
/// since there is nothing to hand a trainer at that threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub kept: usize,
    pub benchmark: String,
    pub accuracy: Option<f64>,
    pub n: usize,
    pub unparsed: usize,
}

/// Sweep the margin threshold: for each T, partition the training instances
/// and report the configured judge's accuracy on every benchmark.
///
/// Judge training on each kept set is an external handoff, so the judged
/// accuracies come from the one configured judge backend; each benchmark is
/// judged once and the result reused across thresholds.
pub async fn threshold_sweep(
    judge: &dyn Backend,
    train_instances: &[JudgeInstance],
    margins: &[MarginRecord],
    thresholds: &[f64],
    benchmarks: &[(String, Vec<JudgeInstance>)],
    template: &PromptTemplate,
    convention: &LabelConvention,
    config: &PipelineConfig,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut judged: Vec<(String, f64, usize, usize)> = Vec::new();
    for (name, instances) in benchmarks {
        let run = judge_dataset(judge, instances, template, convention, &config.sampling, config).await?;
        let accuracy = compute_accuracy(&run.annotations, instances, AccuracyMode::ParsedOnly)?;
        judged.push((name.clone(), accuracy, instances.len(), run.unparsed_count()));
    }

    let mut rows = Vec::new();
    for &threshold in thresholds {
        let (kept, _dropped) = filter_by_margin(train_instances, margins, threshold)?;
        for (benchmark, accuracy, n, unparsed) in &judged {
            rows.push(SweepRow {
                threshold,
                kept: kept.len(),
                benchmark: benchmark.clone(),
                accuracy: if kept.is_empty() { None } else { Some(*accuracy) },
                n: *n,
                unparsed: *unparsed,
            });
        }
    }
    Ok(rows)
}

/// `threshold,kept,benchmark,accuracy,n,unparsed` CSV; accuracy empty on
/// null rows.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut csv = String::from("threshold,kept,benchmark,accuracy,n,unparsed\n");
    for row in rows {
        let accuracy = row.accuracy.map(|a| a.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.threshold, row.kept, row.benchmark, accuracy, row.n, row.unparsed
        ));
    }
    csv
}
