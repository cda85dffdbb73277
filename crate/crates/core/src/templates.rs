//! Prompt templates and placeholder substitution.
//!
//! Template bodies are fixed verbatim; tests lock them against golden files.
//! Placeholders use `{name}` syntax and are filled in a single pass, so
//! substituted values are never re-scanned for placeholders of their own.

use crate::model::JudgeInstance;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::OnceLock;

/// Pairwise judge prompt concluding with a
/// `So, the final decision is Response 1 / Response 2` statement.
pub const AUTOJ_JUDGE: &str = r#"You are assessing two submitted responses on a given user's query and judging which response is better. Here is the data:

[BEGIN DATA]
***
[Query]: {instruction}
***
[Response 1]: {response_A}
***
[Response 2]: {response_B}
***
[END DATA]

Here are the instructions to assess and compare the two responses:

1. Pinpoint the key factors to distinguish these two responses.
2. Conclude your comparison by providing a final decision on which response is better. Begin your final decision statement with "So, the final decision is Response 1 / Response 2". Ensure that your decision aligns coherently with the comprehensive evaluation and comparison you've provided."#;

/// Rubric-based judge prompt concluding with `[RESULT] A` or `[RESULT] B`.
pub const PREF_COLLECTION_JUDGE: &str = r#"###Task Description:
An instruction (might include an Input inside it), a response to evaluate, a reference answer, and a score rubric representing a evaluation criteria are given.
1. Write a detailed feedback that assess the quality of two responses strictly based on the given score rubric, not evaluating in general.
2. After writing a feedback, choose a better response between Response A and Response B. You should refer to the score rubric.
3. The output format should look as follows: "(write a feedback for criteria) [RESULT] (A or B)"
4. Please do not generate any other opening, closing, and explanations.

###Instruction:
{instruction}
###Response A:
{response_A}
###Response B:
{response_B}
###Reference Answer:
{reference_answer}
###Score Rubric:
{rubric}
###Feedback:"#;

/// Flaw-identification prompt. Deliberately asks for no ranking, so outputs
/// carry no decision marker.
pub const CRITIQUE: &str = "You are assessing two submitted responses to a given user's query. Your task is to **identify and articulate the flaws or weaknesses** in each response. These may include, but are not limited to: irrelevance, factual inaccuracies, logical fallacies, ambiguity, verbosity, or failure to address the core of the query.

[BEGIN DATA]
***
[Query]: {instruction}
***
[Response 1]: {response_A}
***
[Response 2]: {response_B}
***
[END DATA]

Please follow these instructions:

1. Critically analyze each response and **point out any notable issues, shortcomings, or limitations**.
2. For each response, **list its weaknesses in bullet points**, providing concise yet specific explanations.
3. If a response does not have major flaws, explicitly state that as well.

Focus on constructive and detailed critique \u{2014} do not provide an overall preference or ranking between the two responses.";

/// Feedback-revision prompt: a comparative judgment and a critical analysis
/// are given as references; the model writes a fresh evaluation that may also
/// conclude with a tie.
pub const AGGREGATE: &str = r#"You are assessing two submitted responses on a given user's query and judging which response is better. Here is the data:

[BEGIN DATA]
***
[Query]: {instruction}
***
[Response 1]: {response_A}
***
[Response 2]: {response_B}
***
[END DATA]

Below are two sample evaluations for the above comparison task. Use them as reference for your own evaluation.

[Reference Evaluation 1 - Comparative Judgment]:
This evaluation determines **which of the two responses is better overall**, providing reasoning and a final decision.

{evaluation_A}

[Reference Evaluation 2 - Critical Analysis]:
This evaluation **identifies weaknesses or flaws in both responses**, such as irrelevance, logical errors, or failure to address the query effectively.

{evaluation_B}

[Reference Evaluation End]

Here are some rules of the evaluation:
1. Pinpoint the key factors to distinguish these two responses.
2. Ensure that your evaluation is self-contained and informative without needing to refer back to these examples.
3. Conclude your comparison by providing a final decision on which response is better, or they are tied. Begin your final decision statement with "So, the final decision is Response 1 / Response 2 / Tie". Ensure that your decision aligns coherently with the comprehensive evaluation and comparison you've provided.
Now, based on both evaluations, please provide your own evaluation for the task:"#;

/// Alternative revision prompt: both evaluations presented without role
/// framing.
pub const NAIVE_CONCAT: &str = r#"You are assessing two submitted responses on a given user's query and judging which response is better. Here is the data:

[BEGIN DATA]
***
[Query]: {instruction}
***
[Response 1]: {response_A}
***
[Response 2]: {response_B}
***
[END DATA]

Here are the instructions to assess and compare the two responses:

1. Pinpoint the key factors to distinguish these two responses.
2. Conclude your comparison by providing a final decision on which response is better. Begin your final decision statement with "So, the final decision is Response 1 / Response 2". Ensure that your decision aligns coherently with the comprehensive evaluation and comparison you've provided.

Below are two sample evaluations for the above comparison tasks. Use them as reference for structure, reasoning, and tone.

[Reference Evaluation 1]:
{evaluation_A}

[Reference Evaluation 2]:
{evaluation_B}

[Reference Evaluation End]

Now, based on the two evaluations, please provide your own evaluation for the tasks:"#;

/// Alternative revision prompt: rephrase a single reference evaluation.
pub const REPHRASE: &str = r#"You are assessing two submitted responses on a given user's query and judging which response is better. Here is the data:

[BEGIN DATA]
***
[Query]: {instruction}
***
[Response 1]: {response_A}
***
[Response 2]: {response_B}
***
[END DATA]

Here are the instructions to assess and compare the two responses:

1. Pinpoint the key factors to distinguish these two responses.
2. Conclude your comparison by providing a final decision on which response is better. Begin your final decision statement with "So, the final decision is Response 1 / Response 2". Ensure that your decision aligns coherently with the comprehensive evaluation and comparison you've provided.

Below is a reference evaluations for the above comparison tasks. Use it as reference for structure, reasoning, and tone.

[Reference Evaluation 1]:
{evaluation_A}

[Reference Evaluation End]

Now, based on the reference evaluation, please provide your own evaluation for the tasks:"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TemplateName {
    AutojJudge,
    PrefCollectionJudge,
    Critique,
    Aggregate,
    NaiveConcat,
    Rephrase,
}

impl TemplateName {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::AutojJudge => "autoj_judge",
            TemplateName::PrefCollectionJudge => "pref_collection_judge",
            TemplateName::Critique => "critique",
            TemplateName::Aggregate => "aggregate",
            TemplateName::NaiveConcat => "naive_concat",
            TemplateName::Rephrase => "rephrase",
        }
    }
}

/// A named template body with `{placeholder}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: &'static str,
}

impl PromptTemplate {
    pub fn get(name: TemplateName) -> PromptTemplate {
        let body = match name {
            TemplateName::AutojJudge => AUTOJ_JUDGE,
            TemplateName::PrefCollectionJudge => PREF_COLLECTION_JUDGE,
            TemplateName::Critique => CRITIQUE,
            TemplateName::Aggregate => AGGREGATE,
            TemplateName::NaiveConcat => NAIVE_CONCAT,
            TemplateName::Rephrase => REPHRASE,
        };
        PromptTemplate { name, body }
    }

    /// Placeholder names the body actually contains, in order of appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut found = Vec::new();
        for caps in placeholder_regex().captures_iter(self.body) {
            let name = match caps.get(1).unwrap().as_str() {
                "instruction" => "instruction",
                "response_A" => "response_A",
                "response_B" => "response_B",
                "reference_answer" => "reference_answer",
                "rubric" => "rubric",
                "evaluation_A" => "evaluation_A",
                "evaluation_B" => "evaluation_B",
                _ => unreachable!("regex restricts names"),
            };
            if !found.contains(&name) {
                found.push(name);
            }
        }
        found
    }
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\{(instruction|response_A|response_B|reference_answer|rubric|evaluation_A|evaluation_B)\}")
            .expect("placeholder regex")
    })
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("template {template} is missing a value for placeholder {placeholder:?}")]
    MissingPlaceholder { template: &'static str, placeholder: String },
}

/// Substitute every placeholder of `template` from the instance and the
/// `extra` map. Instance fields fill `instruction`/`response_A`/`response_B`
/// and, when present, `reference_answer`/`rubric` from the aux record; `extra`
/// fills the rest and overrides nothing.
pub fn render_prompt(
    template: &PromptTemplate,
    instance: &JudgeInstance,
    extra: &HashMap<&str, String>,
) -> Result<String, RenderError> {
    let lookup = |name: &str| -> Option<String> {
        match name {
            "instruction" => Some(instance.instruction.clone()),
            "response_A" => Some(instance.responses[0].clone()),
            "response_B" => Some(instance.responses[1].clone()),
            "reference_answer" => instance
                .aux
                .as_ref()
                .and_then(|a| a.reference_answer.clone())
                .or_else(|| extra.get("reference_answer").cloned()),
            "rubric" => instance
                .aux
                .as_ref()
                .and_then(|a| a.rubric.clone())
                .or_else(|| extra.get("rubric").cloned()),
            other => extra.get(other).cloned(),
        }
    };

    let mut missing = None;
    let rendered = placeholder_regex().replace_all(template.body, |caps: &regex::Captures<'_>| {
        let name = caps.get(1).unwrap().as_str();
        match lookup(name) {
            Some(value) => value,
            None => {
                if missing.is_none() {
                    missing = Some(name.to_string());
                }
                String::new()
            }
        }
    });
    if let Some(placeholder) = missing {
        return Err(RenderError::MissingPlaceholder { template: template.name.as_str(), placeholder });
    }
    Ok(rendered.into_owned())
}
