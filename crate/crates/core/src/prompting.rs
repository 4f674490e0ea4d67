//! Prompt construction for opinion generation, recall continuation,
//! criteria extraction and criteria clustering.
//!
//! Instruction wording lives in template files (`templates/{mode}/{task}.txt`)
//! so the rendered text can be audited byte-for-byte. The built-in set is
//! compiled in; [`TemplateSet::from_dir`] overlays files from disk.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Statement, TaskType};
use crate::parser::{render_entries, render_opinions, Opinion, Stance};
use crate::text::dedup_phrases;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("shot bank has {available} examples but {requested} shots were requested")]
    InsufficientShots { requested: usize, available: usize },
    #[error("stance-style instruction or demonstrations used for a {0} task")]
    StanceStyleForTask(TaskType),
    #[error("recall prompt needs at least one accepted opinion")]
    NoAcceptedOpinions,
    #[error("recall target {target} must exceed the {accepted} accepted opinions")]
    TargetNotGreater { target: usize, accepted: usize },
    #[error("opinion text is empty")]
    EmptyOpinion,
    #[error("no criteria phrases to cluster")]
    EmptyWords,
    #[error("missing template {0:?}")]
    MissingTemplate(String),
    #[error("failed to read templates: {0}")]
    Io(String),
    #[error("malformed shot bank line {line}: {message}")]
    ShotBank { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptMode {
    FreeForm,
    CriteriaBased,
}

impl PromptMode {
    pub fn dir(self) -> &'static str {
        match self {
            PromptMode::FreeForm => "freeform",
            PromptMode::CriteriaBased => "criteria",
        }
    }

    pub fn with_criteria(self) -> bool {
        matches!(self, PromptMode::CriteriaBased)
    }

    pub fn display_name(self) -> &'static str {
        match self {
            PromptMode::FreeForm => "Free-form",
            PromptMode::CriteriaBased => "Criteria",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "criteria" | "criteria-based" | "criteriabased" => Ok(PromptMode::CriteriaBased),
            "freeform" | "free-form" | "free" => Ok(PromptMode::FreeForm),
            other => Err(format!("unknown prompt mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotOpinion {
    pub stance: Stance,
    pub criteria: Vec<String>,
    pub reason: String,
}

/// A demonstration: one statement and its example opinions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotExample {
    pub statement: String,
    pub opinions: Vec<ShotOpinion>,
}

impl ShotExample {
    fn as_opinions(&self) -> Vec<Opinion> {
        self.opinions
            .iter()
            .enumerate()
            .map(|(i, o)| Opinion {
                index: i as u32 + 1,
                stance: o.stance,
                criteria: o.criteria.clone(),
                reason: o.reason.clone(),
                continuation: None,
            })
            .collect()
    }
}

const BUILTIN_SHOTS: &str = include_str!("../data/shots.jsonl");

pub fn parse_shot_bank(jsonl: &str) -> Result<Vec<ShotExample>, PromptError> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PromptError::ShotBank {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// The five built-in demonstrations, profanity first.
pub fn default_shot_bank() -> Vec<ShotExample> {
    parse_shot_bank(BUILTIN_SHOTS).expect("built-in shot bank is valid")
}

pub fn load_shot_bank(path: impl AsRef<Path>) -> Result<Vec<ShotExample>, PromptError> {
    let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io(e.to_string()))?;
    parse_shot_bank(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub shots: usize,
    pub task_type: TaskType,
    /// Overrides the instruction line from the template set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_template: Option<String>,
}

impl PromptSpec {
    pub fn new(mode: PromptMode, shots: usize, task_type: TaskType) -> Self {
        Self {
            mode,
            shots,
            task_type,
            instruction_template: None,
        }
    }
}

macro_rules! builtin {
    ($($key:literal),* $(,)?) => {
        &[$(($key, include_str!(concat!("../templates/", $key, ".txt")))),*]
    };
}

const BUILTIN_TEMPLATES: &[(&str, &str)] = builtin![
    "criteria/stance",
    "criteria/labeling",
    "criteria/generation",
    "freeform/stance",
    "freeform/labeling",
    "freeform/generation",
    "recall/stance",
    "recall/labeling",
    "recall/generation",
    "seed/stance",
    "seed/labeling",
    "seed/generation",
    "format-criteria/stance",
    "format-criteria/labeling",
    "format-criteria/generation",
    "format-freeform/stance",
    "format-freeform/labeling",
    "format-freeform/generation",
    "extraction",
    "clustering",
];

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix('\n')
        .map(|s| s.strip_suffix('\r').unwrap_or(s))
        .unwrap_or(s)
}

/// Named instruction templates with `{{placeholder}}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            templates: BUILTIN_TEMPLATES
                .iter()
                .map(|(k, v)| (k.to_string(), strip_final_newline(v).to_string()))
                .collect(),
        }
    }

    /// Built-in templates overlaid with any `*.txt` files under `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut set = Self::builtin();
        let keys: Vec<String> = set.templates.keys().cloned().collect();
        for key in keys {
            let path = dir.join(format!("{key}.txt"));
            if path.is_file() {
                let text =
                    std::fs::read_to_string(&path).map_err(|e| PromptError::Io(e.to_string()))?;
                set.templates
                    .insert(key, strip_final_newline(&text).to_string());
            }
        }
        Ok(set)
    }

    pub fn get(&self, key: &str) -> Result<&str, PromptError> {
        self.templates
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| PromptError::MissingTemplate(key.to_string()))
    }

    fn render(&self, key: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = self.get(key)?.to_string();
        for (name, value) in vars {
            out = out.replace(&format!("{{{{{name}}}}}"), value);
        }
        Ok(out)
    }

    fn instruction(&self, spec: &PromptSpec) -> Result<String, PromptError> {
        match &spec.instruction_template {
            Some(t) => Ok(t.clone()),
            None => self
                .get(&format!("{}/{}", spec.mode.dir(), spec.task_type))
                .map(str::to_string),
        }
    }

    fn format_block(
        &self,
        mode: PromptMode,
        task: TaskType,
        more: bool,
    ) -> Result<String, PromptError> {
        self.render(
            &format!("format-{}/{}", mode.dir(), task),
            &[("more", if more { ", 2: ..." } else { "" })],
        )
    }
}

fn mentions_stance_labels(text: &str) -> bool {
    [
        "\"Agree\"",
        "\"Disagree\"",
        "\"Hate Speech\"",
        "\"Not Hate Speech\"",
    ]
    .iter()
    .any(|l| text.contains(l))
}

/// Key that opens the next record in a continuation prompt.
fn open_key(task: TaskType) -> &'static str {
    if task.has_stance() {
        "Stance"
    } else {
        "Story"
    }
}

/// Builds the opinion-generation prompt: `spec.shots` demonstrations, then
/// the target statement block ending in `Output:`.
pub fn build_opinion_prompt(
    templates: &TemplateSet,
    spec: &PromptSpec,
    statement: &Statement,
    shot_bank: &[ShotExample],
) -> Result<String, PromptError> {
    if shot_bank.len() < spec.shots {
        return Err(PromptError::InsufficientShots {
            requested: spec.shots,
            available: shot_bank.len(),
        });
    }
    let instruction = templates.instruction(spec)?;
    let shots = &shot_bank[..spec.shots];
    if !spec.task_type.has_stance() && mentions_stance_labels(&instruction) {
        return Err(PromptError::StanceStyleForTask(spec.task_type));
    }
    if shots
        .iter()
        .flat_map(|s| &s.opinions)
        .any(|o| !o.stance.admitted_by(spec.task_type))
    {
        return Err(PromptError::StanceStyleForTask(spec.task_type));
    }

    let mut out = String::new();
    for shot in shots {
        out.push_str("Statement: ");
        out.push_str(&shot.statement);
        out.push('\n');
        out.push_str(&instruction);
        out.push_str("\nOutput:\n");
        out.push_str(&render_opinions(
            &shot.as_opinions(),
            spec.mode.with_criteria(),
        ));
        out.push_str("\n\n");
    }
    out.push_str("Statement: ");
    out.push_str(&statement.text);
    out.push('\n');
    out.push_str(&instruction);
    out.push('\n');
    if spec.shots == 0 {
        out.push_str(&templates.format_block(spec.mode, spec.task_type, true)?);
        out.push('\n');
    }
    out.push_str("Output:");
    Ok(out)
}

/// Zero-shot prompt asking for a single structured opinion, the first step
/// of recall prompting.
pub fn build_seed_prompt(
    templates: &TemplateSet,
    statement: &Statement,
    task: TaskType,
) -> Result<String, PromptError> {
    let instruction = templates.get(&format!("seed/{task}"))?;
    let format = templates.format_block(PromptMode::CriteriaBased, task, false)?;
    Ok(format!(
        "Statement: {}\n{instruction}\n{format}\nOutput:",
        statement.text
    ))
}

/// The literal prefix the model continues in a recall prompt: the accepted
/// records followed by an open header for the next index.
pub fn recall_prefix(accepted: &[Opinion], task: TaskType) -> String {
    format!(
        "{}, {}: {{\"{}\":",
        render_entries(accepted, true),
        accepted.len() + 1,
        open_key(task)
    )
}

/// Recall continuation prompt asking for `n_target` opinions in total, with
/// every accepted opinion serialized as the start of the answer.
pub fn build_recall_prompt(
    templates: &TemplateSet,
    statement: &Statement,
    accepted: &[Opinion],
    n_target: usize,
    task: TaskType,
) -> Result<String, PromptError> {
    if accepted.is_empty() {
        return Err(PromptError::NoAcceptedOpinions);
    }
    if n_target <= accepted.len() {
        return Err(PromptError::TargetNotGreater {
            target: n_target,
            accepted: accepted.len(),
        });
    }
    let instruction =
        templates.render(&format!("recall/{task}"), &[("n", &n_target.to_string())])?;
    Ok(format!(
        "Statement: {}\n{instruction}\nOutput:\n{}",
        statement.text,
        recall_prefix(accepted, task)
    ))
}

pub fn build_criteria_extraction_prompt(
    templates: &TemplateSet,
    opinion_text: &str,
) -> Result<String, PromptError> {
    if opinion_text.trim().is_empty() {
        return Err(PromptError::EmptyOpinion);
    }
    templates.render("extraction", &[("opinion", opinion_text.trim())])
}

/// Three-shot clustering prompt. Input phrases are deduplicated
/// case-insensitively before rendering.
pub fn build_clustering_prompt<S: AsRef<str>>(
    templates: &TemplateSet,
    words: &[S],
) -> Result<String, PromptError> {
    let words = dedup_phrases(words);
    if words.is_empty() {
        return Err(PromptError::EmptyWords);
    }
    templates.render("clustering", &[("words", &words.join(", "))])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stmt(text: &str, task: TaskType) -> Statement {
        Statement {
            id: "t:1".into(),
            text: text.into(),
            dataset_tag: "t".into(),
            task_type: task,
        }
    }

    #[test]
    fn builtin_shot_bank() {
        let bank = default_shot_bank();
        assert_eq!(bank.len(), 5);
        assert_eq!(bank[0].statement, "It's rude to use profanity.");
        for shot in &bank {
            assert_eq!(shot.opinions.len(), 10);
            let agree = shot
                .opinions
                .iter()
                .filter(|o| o.stance == Stance::Agree)
                .count();
            assert_eq!(agree, 5);
            assert!(shot.opinions.iter().all(|o| !o.criteria.is_empty()));
        }
    }

    #[test]
    fn builtin_templates_have_no_trailing_newline() {
        let t = TemplateSet::builtin();
        assert!(t.get("clustering").unwrap().ends_with("Answer:"));
        assert!(t.get("extraction").unwrap().ends_with("Criteria:"));
    }

    #[test]
    fn free_form_zero_shot_never_mentions_criteria() {
        let t = TemplateSet::builtin();
        let p = build_opinion_prompt(
            &t,
            &PromptSpec::new(PromptMode::FreeForm, 0, TaskType::Stance),
            &stmt("It's fine to lie sometimes.", TaskType::Stance),
            &default_shot_bank(),
        )
        .unwrap();
        assert!(!p.contains("Criteria"));
        assert!(p.contains("Generate your response in a Python dict format as follows!"));
        assert!(p.ends_with("Output:"));
    }

    #[test]
    fn five_shot_criteria_has_five_blocks() {
        let t = TemplateSet::builtin();
        let p = build_opinion_prompt(
            &t,
            &PromptSpec::new(PromptMode::CriteriaBased, 5, TaskType::Stance),
            &stmt("Target.", TaskType::Stance),
            &default_shot_bank(),
        )
        .unwrap();
        assert_eq!(p.matches("Statement:").count(), 6);
        assert!(p.contains("\"Criteria\""));
        assert!(!p.contains("Generate your response"));
    }

    #[test]
    fn insufficient_shots_and_generation_guard() {
        let t = TemplateSet::builtin();
        let bank = default_shot_bank();
        let err = build_opinion_prompt(
            &t,
            &PromptSpec::new(PromptMode::CriteriaBased, 6, TaskType::Stance),
            &stmt("x", TaskType::Stance),
            &bank,
        );
        assert!(matches!(err, Err(PromptError::InsufficientShots { .. })));
        let err = build_opinion_prompt(
            &t,
            &PromptSpec::new(PromptMode::CriteriaBased, 1, TaskType::Generation),
            &stmt("x", TaskType::Generation),
            &bank,
        );
        assert_eq!(
            err,
            Err(PromptError::StanceStyleForTask(TaskType::Generation))
        );
        let mut spec = PromptSpec::new(PromptMode::FreeForm, 0, TaskType::Generation);
        spec.instruction_template = Some("Say \"Agree\" or \"Disagree\".".into());
        assert!(build_opinion_prompt(&t, &spec, &stmt("x", TaskType::Generation), &bank).is_err());
        spec.instruction_template = None;
        assert!(build_opinion_prompt(&t, &spec, &stmt("x", TaskType::Generation), &bank).is_ok());
    }

    #[test]
    fn seed_prompts_per_task() {
        let t = TemplateSet::builtin();
        let l = build_seed_prompt(&t, &stmt("x", TaskType::Labeling), TaskType::Labeling).unwrap();
        assert!(l.contains("\"Hate Speech\" or \"Not Hate Speech\""));
        let s = build_seed_prompt(&t, &stmt("x", TaskType::Stance), TaskType::Stance).unwrap();
        assert!(s.contains("\"Agree\" or \"Disagree\""));
        assert!(!s.contains("2: ..."));
        let g =
            build_seed_prompt(&t, &stmt("x", TaskType::Generation), TaskType::Generation).unwrap();
        assert!(g.contains("Continue the story with one sentence"));
    }

    #[test]
    fn recall_header_index_and_errors() {
        let t = TemplateSet::builtin();
        let s = stmt("x", TaskType::Stance);
        let ops: Vec<Opinion> = (1..=4)
            .map(|i| Opinion::new(i, Stance::Agree, &["c"], &format!("reason {i}")))
            .collect();
        let p = build_recall_prompt(&t, &s, &ops, 5, TaskType::Stance).unwrap();
        assert!(p.ends_with("5: {\"Stance\":"));
        assert!(p.contains("from 5 different people"));
        assert_eq!(
            build_recall_prompt(&t, &s, &ops, 4, TaskType::Stance),
            Err(PromptError::TargetNotGreater {
                target: 4,
                accepted: 4
            })
        );
        assert_eq!(
            build_recall_prompt(&t, &s, &[], 2, TaskType::Stance),
            Err(PromptError::NoAcceptedOpinions)
        );
        let g = build_recall_prompt(
            &t,
            &stmt("x", TaskType::Generation),
            &ops[..1],
            2,
            TaskType::Generation,
        )
        .unwrap();
        assert!(g.contains("Continue the story with one sentence as written by different people"));
        assert!(g.ends_with("2: {\"Story\":"));
    }

    #[test]
    fn extraction_prompt_shape() {
        let t = TemplateSet::builtin();
        let p = build_criteria_extraction_prompt(&t, "Dogs are loyal.").unwrap();
        assert!(p.contains("Criteria: [\"openness\", \"honesty\"]"));
        assert!(p.ends_with("Opinion: \"Dogs are loyal.\"\nCriteria:"));
        assert_eq!(
            build_criteria_extraction_prompt(&t, "  "),
            Err(PromptError::EmptyOpinion)
        );
    }

    #[test]
    fn clustering_prompt_dedups() {
        let t = TemplateSet::builtin();
        let p = build_clustering_prompt(&t, &["Safety", "protection", "safety "]).unwrap();
        assert!(p.ends_with("Input: Safety, protection\nAnswer:"));
        assert!(p.contains("[[\"protection\", \"safety\", \"padding\"], "));
        assert!(build_clustering_prompt(&t, &["joy"])
            .unwrap()
            .ends_with("Input: joy\nAnswer:"));
        assert_eq!(
            build_clustering_prompt::<&str>(&t, &[]),
            Err(PromptError::EmptyWords)
        );
    }

    #[test]
    fn template_dir_overlay() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("freeform")).unwrap();
        std::fs::write(dir.path().join("freeform/stance.txt"), "Custom line.\n").unwrap();
        let t = TemplateSet::from_dir(dir.path()).unwrap();
        assert_eq!(t.get("freeform/stance").unwrap(), "Custom line.");
        assert_eq!(
            t.get("criteria/stance").unwrap(),
            TemplateSet::builtin().get("criteria/stance").unwrap()
        );
    }
}
