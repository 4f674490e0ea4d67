//! Scoring a run: criteria extraction when needed, clustering and every
//! metric, assembled into a [`DiversityReport`]. Statements are processed in
//! file order on one thread so the report is reproducible byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{Context, Result};
use divex_core::clustering::{
    count_unique_clusters, criteria_phrases, greedy_embed_cluster, llm_cluster, ClusterMethod,
    CountingMode, CriteriaClustering, StatementClustering, DEFAULT_TAU,
};
use divex_core::metrics::{
    average_opinion_count, lexical_diversity, semantic_diversity_corpus,
    semantic_diversity_statement, stance_balance, CurvePoint, DiversityReport, EmbeddingVector,
    LexicalSection, PerspectiveSection, SemanticSection,
};
use divex_core::orchestrator::{OpinionSet, RecallTrace};
use divex_core::parser::{Opinion, Stance};
use divex_core::prompting::TemplateSet;
use divex_core::TaskType;

use crate::backend::Backend;
use crate::rundir::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSet {
    pub semantic: bool,
    pub perspective: bool,
    pub lexical: bool,
    pub balance: bool,
}

impl MetricSet {
    pub const ALL: MetricSet = MetricSet {
        semantic: true,
        perspective: true,
        lexical: true,
        balance: true,
    };

    pub const NONE: MetricSet = MetricSet {
        semantic: false,
        perspective: false,
        lexical: false,
        balance: false,
    };

    /// Parses names such as `semantic` or `all`.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, String> {
        if names.is_empty() {
            return Ok(Self::ALL);
        }
        let mut m = Self::NONE;
        for n in names {
            match n.as_ref().trim().to_ascii_lowercase().as_str() {
                "all" => m = Self::ALL,
                "semantic" => m.semantic = true,
                "perspective" | "clusters" => m.perspective = true,
                "lexical" => m.lexical = true,
                "balance" | "imbalance" => m.balance = true,
                other => return Err(format!("unknown metric {other:?}")),
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub metrics: MetricSet,
    pub cluster_method: ClusterMethod,
    pub tau: f64,
    pub counting_mode: CountingMode,
    pub ngrams: Vec<usize>,
    pub per_stance: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            metrics: MetricSet::ALL,
            cluster_method: ClusterMethod::LlmPrompted,
            tau: DEFAULT_TAU,
            counting_mode: CountingMode::DropUngrouped,
            ngrams: vec![1, 2, 3],
            per_stance: false,
        }
    }
}

/// One row of `embeddings.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub stance: String,
    pub source: String,
    pub values: Vec<f64>,
}

pub fn embeddings_csv(rows: &[EmbeddingRow]) -> Result<String> {
    let dims = rows.first().map_or(0, |r| r.values.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "stance".into(), "source".into()];
    header.extend((0..dims).map(|d| format!("d{d}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.stance.clone(), r.source.clone()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(
        w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?,
    )?)
}

fn needs_extraction(sets: &[OpinionSet]) -> bool {
    sets.iter()
        .flat_map(|s| &s.opinions)
        .any(|o| o.criteria.is_empty())
}

/// Runs criteria extraction for opinions without criteria. Returns `None`
/// when every opinion already has criteria.
pub fn extract_if_needed(
    backend: &Backend,
    templates: &TemplateSet,
    sets: &[OpinionSet],
) -> Result<Option<Vec<OpinionSet>>> {
    if !needs_extraction(sets) {
        return Ok(None);
    }
    let out = divex_core::orchestrator::run_criteria_extraction(
        backend.chat.as_ref(),
        templates,
        sets,
        1,
    )?;
    Ok(Some(out))
}

/// Clusters each statement's criteria phrases, pooled over stances.
pub fn cluster_sets(
    backend: &Backend,
    templates: &TemplateSet,
    sets: &[OpinionSet],
    method: ClusterMethod,
    tau: f64,
) -> Result<Vec<StatementClustering>> {
    sets.iter()
        .map(|set| {
            let phrases = criteria_phrases(&set.opinions);
            let clustering = if phrases.is_empty() {
                CriteriaClustering::empty(method)
            } else {
                match method {
                    ClusterMethod::LlmPrompted => {
                        llm_cluster(backend.chat.as_ref(), templates, &phrases)
                    }
                    ClusterMethod::EmbeddingGreedy => {
                        greedy_embed_cluster(backend.embed.as_ref(), &phrases, tau)
                    }
                }
                .with_context(|| format!("clustering {}", set.statement_id))?
            };
            log::info!(
                "{}: {} phrases in {} groups",
                set.statement_id,
                clustering.phrase_count(),
                clustering.groups.len()
            );
            Ok(StatementClustering {
                statement_id: set.statement_id.clone(),
                clustering,
            })
        })
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn reasons(opinions: &[&Opinion]) -> Vec<String> {
    opinions
        .iter()
        .filter(|o| !o.reason.trim().is_empty())
        .map(|o| o.reason.clone())
        .collect()
}

fn by_stance(opinions: &[Opinion], stance: Stance) -> Vec<&Opinion> {
    opinions.iter().filter(|o| o.stance == stance).collect()
}

fn semantic_section(
    backend: &Backend,
    sets: &[OpinionSet],
    task: TaskType,
    per_stance: bool,
    source: &str,
    rows: &mut Vec<EmbeddingRow>,
) -> Result<SemanticSection> {
    let mut per_statement = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut stance_scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for set in sets {
        let kept: Vec<&Opinion> = set
            .opinions
            .iter()
            .filter(|o| !o.reason.trim().is_empty())
            .collect();
        if kept.len() < 2 {
            skipped.push(set.statement_id.clone());
            continue;
        }
        let vectors = backend
            .embed
            .embed_texts(&reasons(&kept))
            .with_context(|| format!("embedding reasons of {}", set.statement_id))?;
        for (op, v) in kept.iter().zip(&vectors) {
            rows.push(EmbeddingRow {
                id: format!("{}#{}", set.statement_id, op.index),
                stance: op.stance.key().to_string(),
                source: source.to_string(),
                values: v.values().to_vec(),
            });
        }
        per_statement.insert(
            set.statement_id.clone(),
            semantic_diversity_statement(&vectors)?,
        );
        if per_stance {
            for &stance in Stance::for_task(task) {
                let group: Vec<EmbeddingVector> = kept
                    .iter()
                    .zip(&vectors)
                    .filter(|(o, _)| o.stance == stance)
                    .map(|(_, v)| v.clone())
                    .collect();
                if group.len() >= 2 {
                    stance_scores
                        .entry(stance.key().to_string())
                        .or_default()
                        .insert(
                            set.statement_id.clone(),
                            semantic_diversity_statement(&group)?,
                        );
                }
            }
        }
    }
    let scores: Vec<f64> = per_statement.values().copied().collect();
    Ok(SemanticSection {
        corpus: semantic_diversity_corpus(&scores).ok(),
        per_statement,
        skipped,
        per_stance: per_stance.then_some(stance_scores),
    })
}

fn count_map(
    clustering: &CriteriaClustering,
    statement_id: &str,
    opinions: &[Opinion],
    task: TaskType,
    mode: CountingMode,
) -> Result<BTreeMap<String, usize>> {
    Stance::for_task(task)
        .iter()
        .map(|&stance| {
            let c = count_unique_clusters(statement_id, clustering, opinions, stance, mode)?;
            Ok((stance.key().to_string(), c.unique_clusters))
        })
        .collect()
}

fn perspective_section(
    sets: &[OpinionSet],
    clusters: &BTreeMap<String, &CriteriaClustering>,
    task: TaskType,
    opts: &ScoreOptions,
) -> Result<PerspectiveSection> {
    let mut per_statement = BTreeMap::new();
    let mut ungrouped = 0;
    let mut total = 0;
    for set in sets {
        let clustering = clusters
            .get(&set.statement_id)
            .with_context(|| format!("no clustering for {}", set.statement_id))?;
        ungrouped += clustering.ungrouped.len();
        total += clustering.phrase_count();
        per_statement.insert(
            set.statement_id.clone(),
            count_map(
                clustering,
                &set.statement_id,
                &set.opinions,
                task,
                opts.counting_mode,
            )?,
        );
    }
    let mean_per_stance = Stance::for_task(task)
        .iter()
        .filter_map(|s| {
            mean(per_statement.values().map(|m| m[s.key()] as f64))
                .map(|v| (s.key().to_string(), v))
        })
        .collect();
    Ok(PerspectiveSection {
        cluster_method: opts.cluster_method.as_str().to_string(),
        counting_mode: opts.counting_mode.as_str().to_string(),
        tau: (opts.cluster_method == ClusterMethod::EmbeddingGreedy).then_some(opts.tau),
        per_statement,
        mean_per_stance,
        ungrouped_phrases: ungrouped,
        total_phrases: total,
    })
}

fn lexical_section(
    sets: &[OpinionSet],
    task: TaskType,
    ngrams: &[usize],
) -> Result<LexicalSection> {
    let mut per_statement: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>> =
        BTreeMap::new();
    for set in sets {
        let mut groups = BTreeMap::new();
        for &stance in Stance::for_task(task) {
            let group: Vec<Opinion> = by_stance(&set.opinions, stance)
                .into_iter()
                .cloned()
                .collect();
            if group.is_empty() {
                continue;
            }
            let mut scores = BTreeMap::new();
            for &n in ngrams {
                scores.insert(n.to_string(), lexical_diversity(&group, n)?);
            }
            groups.insert(stance.key().to_string(), scores);
        }
        per_statement.insert(set.statement_id.clone(), groups);
    }
    let mut mean_map: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for &stance in Stance::for_task(task) {
        for &n in ngrams {
            let values = per_statement
                .values()
                .filter_map(|g| g.get(stance.key()).map(|s| s[&n.to_string()]));
            if let Some(m) = mean(values) {
                mean_map
                    .entry(stance.key().to_string())
                    .or_default()
                    .insert(n.to_string(), m);
            }
        }
    }
    Ok(LexicalSection {
        per_statement,
        mean: mean_map,
    })
}

/// Unique clusters against the number of opinions requested at each recall
/// step. A trace that stopped early contributes its last opinions to later
/// steps.
fn recall_curve(
    traces: &[RecallTrace],
    sets: &[OpinionSet],
    clusters: &BTreeMap<String, &CriteriaClustering>,
    schedule: &[usize],
    task: TaskType,
    mode: CountingMode,
) -> Result<Vec<CurvePoint>> {
    let by_id: BTreeMap<&str, &OpinionSet> =
        sets.iter().map(|s| (s.statement_id.as_str(), s)).collect();
    let mut curve = Vec::new();
    for &n in schedule {
        let mut lens = Vec::new();
        let mut counts: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for t in traces {
            let Some(set) = by_id.get(t.statement_id.as_str()) else {
                continue;
            };
            let len = t
                .steps
                .iter()
                .take_while(|s| s.n_target <= n)
                .last()
                .map_or(1, |s| s.opinions.len())
                .min(set.opinions.len());
            let prefix = &set.opinions[..len];
            lens.push(len as f64);
            if let Some(c) = clusters.get(&t.statement_id) {
                for (k, v) in count_map(c, &t.statement_id, prefix, task, mode)? {
                    counts.entry(k).or_default().push(v as f64);
                }
            }
        }
        curve.push(CurvePoint {
            n,
            statements: lens.len(),
            mean_opinions: mean(lens).unwrap_or(0.0),
            mean_clusters: counts
                .into_iter()
                .filter_map(|(k, v)| mean(v).map(|m| (k, m)))
                .collect(),
        });
    }
    Ok(curve)
}

pub struct ScoreInputs<'a> {
    pub manifest: &'a RunManifest,
    pub sets: &'a [OpinionSet],
    pub traces: Option<&'a [RecallTrace]>,
    pub clusters: Option<&'a [StatementClustering]>,
}

pub struct Scored {
    pub report: DiversityReport,
    pub embeddings: Vec<EmbeddingRow>,
}

pub fn build_report(
    backend: &Backend,
    inputs: &ScoreInputs,
    opts: &ScoreOptions,
) -> Result<Scored> {
    let m = inputs.manifest;
    let task = m.config.prompt_spec.task_type;
    let sets = inputs.sets;
    let recall = m.kind == "recall";
    let source = if recall {
        "recall"
    } else {
        m.config.prompt_spec.mode.dir()
    };
    let mut embeddings = Vec::new();
    let semantic = if opts.metrics.semantic {
        Some(semantic_section(
            backend,
            sets,
            task,
            opts.per_stance,
            source,
            &mut embeddings,
        )?)
    } else {
        None
    };
    let clusters: BTreeMap<String, &CriteriaClustering> = inputs
        .clusters
        .unwrap_or_default()
        .iter()
        .map(|c| (c.statement_id.clone(), &c.clustering))
        .collect();
    let perspective = if opts.metrics.perspective {
        Some(perspective_section(sets, &clusters, task, opts)?)
    } else {
        None
    };
    let lexical = if opts.metrics.lexical {
        Some(lexical_section(sets, task, &opts.ngrams)?)
    } else {
        None
    };
    let balance = if opts.metrics.balance && task.has_stance() {
        Some(stance_balance(
            sets.iter()
                .map(|s| (s.statement_id.as_str(), s.opinions.as_slice())),
            task,
        )?)
    } else {
        None
    };
    let recall_curve = match inputs.traces {
        Some(traces) if recall && opts.metrics.perspective => Some(recall_curve(
            traces,
            sets,
            &clusters,
            &m.config.recall_schedule,
            task,
            opts.counting_mode,
        )?),
        _ => None,
    };
    let report = DiversityReport {
        run_id: m.run_id.clone(),
        kind: m.kind.clone(),
        task_type: task,
        prompt_mode: (!recall).then_some(m.config.prompt_spec.mode),
        shots: (!recall).then_some(m.config.prompt_spec.shots),
        model_id: m.config.provider.model_id.clone(),
        embedding_model_id: m.embedding.model_id.clone(),
        corpus_fingerprint: m.corpus.fingerprint.clone(),
        statements: sets.len(),
        opinion_counts: sets
            .iter()
            .map(|s| (s.statement_id.clone(), s.opinions.len()))
            .collect(),
        average_opinion_count: average_opinion_count(sets).context("run has no opinion sets")?,
        semantic,
        perspective,
        lexical,
        balance,
        recall_curve,
    };
    Ok(Scored { report, embeddings })
}

/// Summary lines printed after scoring.
pub fn summary(report: &DiversityReport) -> String {
    let mut out = String::new();
    for (name, v) in report.rows() {
        let _ = writeln!(
            out,
            "{name}: {}",
            v.map_or("-".into(), |x| format!("{x:.4}"))
        );
    }
    out
}
