//! Experiment runs: batch opinion generation and the step-by-step recall
//! loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Statement, TaskType};
use crate::parser::{parse_completion, parse_criteria_list, Opinion, ParseOutcome};
use crate::prompting::{
    build_criteria_extraction_prompt, build_opinion_prompt, build_recall_prompt, build_seed_prompt,
    recall_prefix, PromptError, PromptMode, PromptSpec, ShotExample, TemplateSet,
};
use crate::provider::{ChatProvider, ProviderConfig, ProviderError};
use crate::text::file_safe;

pub const DEFAULT_SCHEDULE: [usize; 7] = [2, 5, 8, 11, 14, 17, 20];

/// Consecutive recall steps without new records after which the loop stops.
pub const EMPTY_STEPS_BEFORE_STOP: usize = 2;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("seed opinion unparseable: {0}")]
    Seed(String),
    #[error("invalid recall schedule: {0}")]
    Schedule(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub prompt_spec: PromptSpec,
    pub provider: ProviderConfig,
    pub corpus_path: String,
    pub recall_schedule: Vec<usize>,
    pub seed: u64,
    /// Statements processed concurrently.
    pub concurrency: usize,
}

impl RunConfig {
    pub fn new(
        run_id: impl Into<String>,
        prompt_spec: PromptSpec,
        provider: ProviderConfig,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            prompt_spec,
            provider,
            corpus_path: String::new(),
            recall_schedule: DEFAULT_SCHEDULE.to_vec(),
            seed: 0,
            concurrency: 4,
        }
    }
}

/// Checks that targets are strictly increasing and start at 2 or more.
pub fn validate_schedule(schedule: &[usize]) -> Result<(), OrchestratorError> {
    if schedule.is_empty() {
        return Err(OrchestratorError::Schedule("empty".into()));
    }
    if schedule[0] < 2 {
        return Err(OrchestratorError::Schedule(format!(
            "first target must be at least 2, got {}",
            schedule[0]
        )));
    }
    if let Some(w) = schedule.windows(2).find(|w| w[1] <= w[0]) {
        return Err(OrchestratorError::Schedule(format!(
            "targets must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Opinions for one statement under one run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpinionSet {
    pub statement_id: String,
    pub task_type: TaskType,
    pub opinions: Vec<Opinion>,
    pub prompt_mode: PromptMode,
    pub shots: usize,
    pub model_id: String,
    /// Path of the raw completion relative to the run directory.
    pub raw_completion_ref: String,
    #[serde(default)]
    pub recovered: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub raw_completion: String,
}

/// A statement that could not be processed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementFailure {
    pub statement_id: String,
    pub stage: String,
    pub error: String,
}

pub fn raw_ref(statement_id: &str) -> String {
    format!("raw/{}.txt", file_safe(statement_id))
}

#[derive(Debug, Clone, Default)]
pub struct GenerationOutput {
    pub sets: Vec<OpinionSet>,
    pub failures: Vec<StatementFailure>,
}

fn pool(concurrency: usize) -> Result<rayon::ThreadPool, OrchestratorError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| OrchestratorError::Pool(e.to_string()))
}

fn generate_one(
    config: &RunConfig,
    chat: &dyn ChatProvider,
    templates: &TemplateSet,
    shot_bank: &[ShotExample],
    statement: &Statement,
) -> Result<OpinionSet, StatementFailure> {
    let fail = |stage: &str, e: String| StatementFailure {
        statement_id: statement.id.clone(),
        stage: stage.to_string(),
        error: e,
    };
    let mut spec = config.prompt_spec.clone();
    spec.task_type = statement.task_type;
    let prompt = build_opinion_prompt(templates, &spec, statement, shot_bank)
        .map_err(|e| fail("prompt", e.to_string()))?;
    let exchange = chat
        .chat_complete(&prompt)
        .map_err(|e| fail("provider", e.to_string()))?;
    let (outcome, mut warnings) = match parse_completion(&exchange.completion, statement.task_type)
    {
        Ok(o) => (o, Vec::new()),
        Err(e) => (ParseOutcome::default(), vec![format!("parse: {e}")]),
    };
    warnings.extend(outcome.warnings);
    Ok(OpinionSet {
        statement_id: statement.id.clone(),
        task_type: statement.task_type,
        opinions: outcome.opinions,
        prompt_mode: spec.mode,
        shots: spec.shots,
        model_id: exchange.model_id,
        raw_completion_ref: raw_ref(&statement.id),
        recovered: outcome.recovered,
        warnings,
        raw_completion: exchange.completion,
    })
}

/// One opinion-generation call per statement, up to `config.concurrency` in
/// parallel. Provider failures are recorded per statement; an unparseable
/// completion yields an empty set with a warning.
pub fn run_generation(
    config: &RunConfig,
    chat: &dyn ChatProvider,
    templates: &TemplateSet,
    shot_bank: &[ShotExample],
    corpus: &Corpus,
) -> Result<GenerationOutput, OrchestratorError> {
    let results: Vec<Result<OpinionSet, StatementFailure>> =
        pool(config.concurrency)?.install(|| {
            corpus
                .statements
                .par_iter()
                .map(|s| {
                    let r = generate_one(config, chat, templates, shot_bank, s);
                    match &r {
                        Ok(set) => log::info!("{}: {} opinions", s.id, set.opinions.len()),
                        Err(f) => log::warn!("{}: {} failed: {}", s.id, f.stage, f.error),
                    }
                    r
                })
                .collect()
        });
    let mut out = GenerationOutput::default();
    for r in results {
        match r {
            Ok(set) => out.sets.push(set),
            Err(f) => out.failures.push(f),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallStep {
    pub n_target: usize,
    /// Accepted opinions after this step; always extends the previous step.
    pub opinions: Vec<Opinion>,
    pub new_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallTrace {
    pub statement_id: String,
    pub task_type: TaskType,
    pub model_id: String,
    pub seed_opinion: Opinion,
    pub steps: Vec<RecallStep>,
    pub final_opinions: Vec<Opinion>,
    pub stopped_early: bool,
    /// Set when a provider error ended the loop before the schedule finished.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Raw completions: seed first, then one per executed step.
    #[serde(skip)]
    pub completions: Vec<String>,
}

impl RecallTrace {
    /// Final opinions as an opinion set for scoring.
    pub fn to_opinion_set(&self) -> OpinionSet {
        OpinionSet {
            statement_id: self.statement_id.clone(),
            task_type: self.task_type,
            opinions: self.final_opinions.clone(),
            prompt_mode: PromptMode::CriteriaBased,
            shots: 0,
            model_id: self.model_id.clone(),
            raw_completion_ref: raw_ref(&self.statement_id),
            recovered: false,
            warnings: self.warnings.clone(),
            raw_completion: String::new(),
        }
    }

    /// Raw completions joined with step headers, as written to `raw/`.
    pub fn raw_transcript(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.completions.iter().enumerate() {
            if i == 0 {
                out.push_str("### seed\n");
            } else {
                out.push_str(&format!("### n={}\n", self.steps[i - 1].n_target));
            }
            out.push_str(c);
            out.push('\n');
        }
        out
    }
}

/// Parses a recall completion. The model normally continues the open record
/// header, so the prompt prefix is prepended; a completion that restarts
/// the dict is parsed on its own.
fn parse_recall_completion(
    completion: &str,
    accepted: &[Opinion],
    task: TaskType,
) -> Result<ParseOutcome, String> {
    let trimmed = completion.trim_start();
    let text = if trimmed.starts_with('{') || trimmed.starts_with("```") {
        completion.to_string()
    } else {
        format!("{}{}", recall_prefix(accepted, task), completion)
    };
    parse_completion(&text, task).map_err(|e| e.to_string())
}

/// Step-by-step recall for one statement: a seed prompt for one opinion,
/// then one continuation prompt per schedule target.
pub fn run_recall(
    config: &RunConfig,
    chat: &dyn ChatProvider,
    templates: &TemplateSet,
    statement: &Statement,
) -> Result<RecallTrace, OrchestratorError> {
    validate_schedule(&config.recall_schedule)?;
    let task = statement.task_type;
    let seed_prompt = build_seed_prompt(templates, statement, task)?;
    let seed = chat.chat_complete(&seed_prompt)?;
    let outcome = parse_completion(&seed.completion, task)
        .map_err(|e| OrchestratorError::Seed(e.to_string()))?;
    let mut warnings: Vec<String> = outcome
        .warnings
        .iter()
        .map(|w| format!("seed: {w}"))
        .collect();
    let mut first = outcome
        .opinions
        .into_iter()
        .next()
        .ok_or_else(|| OrchestratorError::Seed("no opinion records".into()))?;
    first.index = 1;

    let mut trace = RecallTrace {
        statement_id: statement.id.clone(),
        task_type: task,
        model_id: seed.model_id,
        seed_opinion: first.clone(),
        steps: Vec::new(),
        final_opinions: Vec::new(),
        stopped_early: false,
        aborted: None,
        warnings: Vec::new(),
        completions: vec![seed.completion],
    };
    let mut accepted = vec![first];
    let mut empty_streak = 0;

    for &n in &config.recall_schedule {
        let prompt = build_recall_prompt(templates, statement, &accepted, n, task)?;
        let completion = match chat.chat_complete(&prompt) {
            Ok(ex) => ex.completion,
            Err(e) => {
                warnings.push(format!("n={n}: provider error: {e}"));
                trace.aborted = Some(e.to_string());
                break;
            }
        };
        let k = accepted.len();
        let mut fresh: Vec<Opinion> = match parse_recall_completion(&completion, &accepted, task) {
            Ok(o) => {
                warnings.extend(o.warnings.iter().map(|w| format!("n={n}: {w}")));
                o.opinions
                    .into_iter()
                    .filter(|op| op.index as usize > k)
                    .collect()
            }
            Err(e) => {
                warnings.push(format!("n={n}: parse: {e}"));
                Vec::new()
            }
        };
        trace.completions.push(completion);
        if fresh.len() > n - k {
            warnings.push(format!(
                "n={n}: dropped {} records beyond the target",
                fresh.len() - (n - k)
            ));
            fresh.truncate(n - k);
        }
        for (offset, op) in fresh.iter_mut().enumerate() {
            let want = (k + offset + 1) as u32;
            if op.index != want {
                warnings.push(format!("n={n}: renumbered record {} to {want}", op.index));
                op.index = want;
            }
        }
        let added = fresh.len();
        accepted.extend(fresh);
        trace.steps.push(RecallStep {
            n_target: n,
            opinions: accepted.clone(),
            new_records: added,
        });
        if added == 0 {
            empty_streak += 1;
            if empty_streak >= EMPTY_STEPS_BEFORE_STOP {
                trace.stopped_early = true;
                break;
            }
        } else {
            empty_streak = 0;
        }
    }
    trace.final_opinions = accepted;
    trace.warnings = warnings;
    Ok(trace)
}

#[derive(Debug, Clone, Default)]
pub struct RecallOutput {
    pub traces: Vec<RecallTrace>,
    pub failures: Vec<StatementFailure>,
}

/// [`run_recall`] over a corpus, statements in parallel, steps within one
/// statement sequential.
pub fn run_recall_corpus(
    config: &RunConfig,
    chat: &dyn ChatProvider,
    templates: &TemplateSet,
    corpus: &Corpus,
) -> Result<RecallOutput, OrchestratorError> {
    validate_schedule(&config.recall_schedule)?;
    let results: Vec<Result<RecallTrace, StatementFailure>> =
        pool(config.concurrency)?.install(|| {
            corpus
                .statements
                .par_iter()
                .map(|s| {
                    let r = run_recall(config, chat, templates, s).map_err(|e| StatementFailure {
                        statement_id: s.id.clone(),
                        stage: match e {
                            OrchestratorError::Seed(_) => "seed",
                            OrchestratorError::Provider(_) => "provider",
                            _ => "prompt",
                        }
                        .to_string(),
                        error: e.to_string(),
                    });
                    match &r {
                        Ok(t) => log::info!(
                            "{}: {} opinions after {} steps",
                            s.id,
                            t.final_opinions.len(),
                            t.steps.len()
                        ),
                        Err(f) => log::warn!("{}: {} failed: {}", s.id, f.stage, f.error),
                    }
                    r
                })
                .collect()
        });
    let mut out = RecallOutput::default();
    for r in results {
        match r {
            Ok(t) => out.traces.push(t),
            Err(f) => out.failures.push(f),
        }
    }
    Ok(out)
}

/// Text handed to the extraction prompt for one opinion.
fn extraction_text(op: &Opinion) -> &str {
    if op.reason.trim().is_empty() {
        op.continuation.as_deref().unwrap_or("")
    } else {
        &op.reason
    }
}

/// Attaches criteria to opinions that have none, via the extraction prompt.
/// Failures leave the criteria empty and add a warning to the set.
pub fn run_criteria_extraction(
    chat: &dyn ChatProvider,
    templates: &TemplateSet,
    sets: &[OpinionSet],
    concurrency: usize,
) -> Result<Vec<OpinionSet>, OrchestratorError> {
    let annotate = |set: &OpinionSet| {
        let mut set = set.clone();
        for op in set.opinions.iter_mut().filter(|o| o.criteria.is_empty()) {
            let result = build_criteria_extraction_prompt(templates, extraction_text(op))
                .map_err(|e| e.to_string())
                .and_then(|p| chat.chat_complete(&p).map_err(|e| e.to_string()))
                .and_then(|ex| parse_criteria_list(&ex.completion).map_err(|e| e.to_string()));
            match result {
                Ok(criteria) => op.criteria = criteria,
                Err(e) => set
                    .warnings
                    .push(format!("criteria extraction for opinion {}: {e}", op.index)),
            }
        }
        set
    };
    Ok(pool(concurrency)?.install(|| sets.par_iter().map(annotate).collect()))
}
