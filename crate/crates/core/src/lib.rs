//! Batch pipeline for debiasing LLM-as-a-judge training data, plus an
//! evaluation harness for pairwise-ranking accuracy and teacher preference
//! bias.
//!
//! The pipeline has three stages. Stage 1 collects judge annotations from a
//! teacher and an assistant backend, keeps the instances they agree on as a
//! consensus pool, exports that pool for external DPO training, and then
//! filters the training set by the implicit reward margin the trained
//! policy/reference pair assigns each preference. Stage 2 has the assistant
//! critique both responses and rewrite the teacher's feedback around the
//! critique, keeping only records whose revised verdict matches the filtered
//! label. Stage 3 exports the surviving records as a fine-tune dataset with a
//! reproducibility manifest; the training itself is a handoff to an external
//! trainer. The evaluation harness judges benchmarks, computes accuracy, and
//! quantifies how far a judge's preference for teacher-sourced responses
//! exceeds the reference labels'.

pub mod annotate;
pub mod backend;
pub mod cli;
pub mod config;
pub mod evalharness;
pub mod export;
pub mod ingest;
pub mod jsonl;
pub mod manifest;
pub mod model;
pub mod stage1;
pub mod stage2;
pub mod templates;

pub use model::{Annotation, JudgeInstance, Label, LabelConvention};
