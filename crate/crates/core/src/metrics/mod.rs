//! Diversity metrics: semantic (pairwise cosine distance of reason
//! embeddings), lexical (distinct n-gram ratio), stance balance,
//! top-frequency criteria agreement and opinion counts.

mod report;

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskType;
use crate::orchestrator::OpinionSet;
use crate::parser::{Opinion, Stance};
use crate::text::normalize_phrase;

pub use report::{
    comparison_markdown, curves_csv, BalanceReport, CurvePoint, DiversityReport, LexicalSection,
    PerspectiveSection, SemanticSection, StanceCounts,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("embedding has zero dimensions")]
    EmptyVector,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("need at least 2 reasons, got {0}")]
    TooFewReasons(usize),
    #[error("no scored statements")]
    NoScores,
    #[error("n-gram size must be 1, 2 or 3, got {0}")]
    BadGramSize(usize),
    #[error("empty input")]
    Empty,
    #[error("stance balance is undefined for generation tasks")]
    NoStances,
    #[error("top fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("paired samples differ in length: {0} vs {1}")]
    Unpaired(usize, usize),
}

/// Fixed-length embedding of one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MetricError> {
        if values.is_empty() {
            return Err(MetricError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }

    fn unit(&self) -> Result<Vec<f64>, MetricError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(MetricError::ZeroVector);
        }
        Ok(self.0.iter().map(|v| v / n).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::DimMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    let cos = dot(&a.0, &b.0) / (na * nb);
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Mean cosine distance over all unordered pairs of reason embeddings.
pub fn semantic_diversity_statement(reasons: &[EmbeddingVector]) -> Result<f64, MetricError> {
    if reasons.len() < 2 {
        return Err(MetricError::TooFewReasons(reasons.len()));
    }
    let dim = reasons[0].dim();
    if let Some(bad) = reasons.iter().find(|r| r.dim() != dim) {
        return Err(MetricError::DimMismatch(dim, bad.dim()));
    }
    let units = reasons
        .iter()
        .map(EmbeddingVector::unit)
        .collect::<Result<Vec<_>, _>>()?;
    let n = units.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += (1.0 - dot(&units[i], &units[j])).clamp(0.0, 2.0);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(total / pairs)
}

/// Unweighted mean of per-statement scores.
pub fn semantic_diversity_corpus(scores: &[f64]) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::NoScores);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn tokens(opinions: &[Opinion]) -> Vec<String> {
    opinions
        .iter()
        .flat_map(|o| o.reason.split_whitespace().map(str::to_lowercase))
        .collect()
}

/// Distinct / total n-grams over the whitespace-tokenized, lowercased
/// reasons of one stance group, concatenated in order. Returns 1 when there
/// is at most one n-gram.
pub fn lexical_diversity(opinions: &[Opinion], n: usize) -> Result<f64, MetricError> {
    if !(1..=3).contains(&n) {
        return Err(MetricError::BadGramSize(n));
    }
    if opinions.is_empty() {
        return Err(MetricError::Empty);
    }
    let toks = tokens(opinions);
    if toks.len() < n {
        return Ok(1.0);
    }
    let total = toks.len() - n + 1;
    if total <= 1 {
        return Ok(1.0);
    }
    let distinct: HashSet<&[String]> = toks.windows(n).collect();
    Ok(distinct.len() as f64 / total as f64)
}

/// Per-statement stance counts and the fraction of imbalanced statements.
pub fn stance_balance<'a, I>(sets: I, task: TaskType) -> Result<BalanceReport, MetricError>
where
    I: IntoIterator<Item = (&'a str, &'a [Opinion])>,
{
    if !task.has_stance() {
        return Err(MetricError::NoStances);
    }
    let stances = Stance::for_task(task);
    let mut per_statement = BTreeMap::new();
    for (id, opinions) in sets {
        let counts: BTreeMap<String, usize> = stances
            .iter()
            .map(|s| {
                (
                    s.key().to_string(),
                    opinions.iter().filter(|o| o.stance == *s).count(),
                )
            })
            .collect();
        let mut values = counts.values();
        let first = values.next().copied().unwrap_or(0);
        let imbalanced = values.any(|&v| v != first);
        per_statement.insert(id.to_string(), StanceCounts { counts, imbalanced });
    }
    if per_statement.is_empty() {
        return Err(MetricError::Empty);
    }
    let imbalanced = per_statement.values().filter(|c| c.imbalanced).count();
    Ok(BalanceReport {
        imbalanced_fraction: imbalanced as f64 / per_statement.len() as f64,
        imbalanced_statements: imbalanced,
        total_statements: per_statement.len(),
        per_statement,
    })
}

/// Phrases ranked by descending frequency, ties by normalized text.
pub fn rank_by_frequency(source: &[Vec<String>]) -> Vec<(String, usize)> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for phrase in source.iter().flatten() {
        let p = normalize_phrase(phrase);
        if !p.is_empty() {
            *freq.entry(p).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Fraction of `source_a` opinions that use at least one of the top
/// `ceil(top_fraction * distinct)` most frequent phrases of `source_b`.
/// Each inner vector is one opinion's criteria.
pub fn criteria_agreement(
    source_a: &[Vec<String>],
    source_b: &[Vec<String>],
    top_fraction: f64,
) -> Result<f64, MetricError> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(MetricError::BadFraction(top_fraction));
    }
    if source_a.is_empty() {
        return Err(MetricError::Empty);
    }
    let ranked = rank_by_frequency(source_b);
    if ranked.is_empty() {
        return Err(MetricError::Empty);
    }
    // guard against 0.1 * 30 = 3.0000000000000004
    let k = ((top_fraction * ranked.len() as f64) - 1e-9)
        .ceil()
        .max(1.0) as usize;
    let top: HashSet<&str> = ranked.iter().take(k).map(|(p, _)| p.as_str()).collect();
    let hits = source_a
        .iter()
        .filter(|op| {
            op.iter()
                .any(|p| top.contains(normalize_phrase(p).as_str()))
        })
        .count();
    Ok(hits as f64 / source_a.len() as f64)
}

/// Mean number of opinions per statement.
pub fn average_opinion_count(sets: &[OpinionSet]) -> Result<f64, MetricError> {
    if sets.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(sets.iter().map(|s| s.opinions.len()).sum::<usize>() as f64 / sets.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub mean_difference: f64,
    /// One-sided p-value for `mean(a) > mean(b)`.
    pub p_value: f64,
    pub exact: bool,
}

/// Paired sign-flip permutation test on per-statement scores. Exact
/// enumeration up to 16 pairs, Monte Carlo with `iterations` draws above.
pub fn paired_permutation_test(
    a: &[f64],
    b: &[f64],
    iterations: usize,
    seed: u64,
) -> Result<PermutationResult, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Unpaired(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let observed = diffs.iter().sum::<f64>() / n as f64;
    let tol = 1e-12;
    let stat = |signs: &dyn Fn(usize) -> bool| {
        diffs
            .iter()
            .enumerate()
            .map(|(i, d)| if signs(i) { -d } else { *d })
            .sum::<f64>()
            / n as f64
    };
    if n <= 16 {
        let total = 1usize << n;
        let extreme = (0..total)
            .filter(|mask| stat(&|i| mask >> i & 1 == 1) >= observed - tol)
            .count();
        return Ok(PermutationResult {
            mean_difference: observed,
            p_value: extreme as f64 / total as f64,
            exact: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..iterations {
        let flips: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if stat(&|i| flips[i]) >= observed - tol {
            extreme += 1;
        }
    }
    Ok(PermutationResult {
        mean_difference: observed,
        p_value: (extreme + 1) as f64 / (iterations + 1) as f64,
        exact: false,
    })
}
