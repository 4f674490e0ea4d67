//! Grouping criteria phrases into meaning-equivalent clusters and counting
//! the clusters each stance touches.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::EmbeddingVector;
use crate::parser::{parse_cluster_output, Opinion, ParseError, Stance};
use crate::prompting::{build_clustering_prompt, PromptError, TemplateSet};
use crate::provider::{ChatProvider, EmbeddingProvider, ProviderError};
use crate::text::{dedup_phrases, normalize_phrase};

pub const DEFAULT_TAU: f64 = 0.8;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("unparseable clustering output: {0}")]
    Parse(#[from] ParseError),
    #[error("tau must be in (0, 1), got {0}")]
    BadTau(f64),
    #[error("phrases and embeddings differ in length: {0} vs {1}")]
    Length(usize, usize),
    #[error("phrase {0:?} has no disposition in the clustering")]
    NoDisposition(String),
    #[error("zero embedding for phrase {0:?}")]
    ZeroEmbedding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    LlmPrompted,
    EmbeddingGreedy,
}

impl ClusterMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusterMethod::LlmPrompted => "llm",
            ClusterMethod::EmbeddingGreedy => "greedy",
        }
    }
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClusterMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "llm" | "llm_prompted" | "llm-prompted" => Ok(ClusterMethod::LlmPrompted),
            "greedy" | "embedding" | "embedding_greedy" | "embedding-greedy" => {
                Ok(ClusterMethod::EmbeddingGreedy)
            }
            other => Err(format!(
                "unknown cluster method {other:?} (expected llm or greedy)"
            )),
        }
    }
}

/// How phrases the clustering left ungrouped are counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingMode {
    /// Each touched ungrouped phrase counts as its own cluster.
    SingletonUngrouped,
    #[default]
    DropUngrouped,
}

impl CountingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CountingMode::SingletonUngrouped => "singleton",
            CountingMode::DropUngrouped => "drop",
        }
    }
}

impl fmt::Display for CountingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CountingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "singleton" | "singleton_ungrouped" | "singleton-ungrouped" => {
                Ok(CountingMode::SingletonUngrouped)
            }
            "drop" | "drop_ungrouped" | "drop-ungrouped" => Ok(CountingMode::DropUngrouped),
            other => Err(format!(
                "unknown counting mode {other:?} (expected singleton or drop)"
            )),
        }
    }
}

/// Partition of criteria phrases. Every input phrase is in exactly one group
/// or in `ungrouped`; surface forms are kept as they appeared in the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaClustering {
    pub groups: Vec<Vec<String>>,
    pub ungrouped: Vec<String>,
    pub method: ClusterMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Where a phrase landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Group(usize),
    Ungrouped(usize),
}

impl CriteriaClustering {
    pub fn empty(method: ClusterMethod) -> Self {
        Self {
            groups: Vec::new(),
            ungrouped: Vec::new(),
            method,
            tau: None,
            warnings: Vec::new(),
        }
    }

    pub fn phrase_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum::<usize>() + self.ungrouped.len()
    }

    /// Normalized phrase → disposition.
    pub fn index(&self) -> HashMap<String, Disposition> {
        let mut map = HashMap::new();
        for (g, group) in self.groups.iter().enumerate() {
            for p in group {
                map.entry(normalize_phrase(p))
                    .or_insert(Disposition::Group(g));
            }
        }
        for (u, p) in self.ungrouped.iter().enumerate() {
            map.entry(normalize_phrase(p))
                .or_insert(Disposition::Ungrouped(u));
        }
        map
    }
}

/// A clustering tagged with the statement it belongs to, one line of
/// `clusters.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatementClustering {
    pub statement_id: String,
    #[serde(flatten)]
    pub clustering: CriteriaClustering,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCount {
    pub statement_id: String,
    pub stance: Stance,
    pub unique_clusters: usize,
    pub counting_mode: CountingMode,
}

/// Distinct criteria phrases across opinions, first surface form kept.
pub fn criteria_phrases(opinions: &[Opinion]) -> Vec<String> {
    let all: Vec<&str> = opinions
        .iter()
        .flat_map(|o| o.criteria.iter().map(String::as_str))
        .collect();
    dedup_phrases(&all)
}

/// Reconciles a model grouping against the input phrases: invented phrases
/// are discarded, repeated phrases keep their first group, omitted phrases go
/// to `ungrouped`.
fn reconcile(input: &[String], model_groups: Vec<Vec<String>>) -> CriteriaClustering {
    let surface: HashMap<String, &String> =
        input.iter().map(|p| (normalize_phrase(p), p)).collect();
    let mut assigned = BTreeSet::new();
    let mut out = CriteriaClustering::empty(ClusterMethod::LlmPrompted);
    for group in model_groups {
        let mut kept = Vec::new();
        for phrase in group {
            let key = normalize_phrase(&phrase);
            match surface.get(&key) {
                None => out
                    .warnings
                    .push(format!("discarded phrase not in input: {phrase:?}")),
                Some(s) if !assigned.insert(key.clone()) => {
                    out.warnings.push(format!(
                        "phrase {s:?} placed in more than one group; kept first"
                    ));
                }
                Some(s) => kept.push((*s).clone()),
            }
        }
        if !kept.is_empty() {
            out.groups.push(kept);
        }
    }
    for p in input {
        if !assigned.contains(&normalize_phrase(p)) {
            out.ungrouped.push(p.clone());
        }
    }
    if !out.ungrouped.is_empty() {
        out.warnings.push(format!(
            "{} of {} phrases left ungrouped by the model",
            out.ungrouped.len(),
            input.len()
        ));
    }
    out
}

/// Clusters phrases with the three-shot clustering prompt.
pub fn llm_cluster<S: AsRef<str>>(
    chat: &dyn ChatProvider,
    templates: &TemplateSet,
    phrases: &[S],
) -> Result<CriteriaClustering, ClusterError> {
    let input = dedup_phrases(phrases);
    if input.is_empty() {
        return Ok(CriteriaClustering::empty(ClusterMethod::LlmPrompted));
    }
    let prompt = build_clustering_prompt(templates, &input)?;
    let exchange = chat.chat_complete(&prompt)?;
    let answer = exchange.completion.trim();
    let groups = match parse_cluster_output(answer) {
        Ok(g) => g,
        // a bare list of words is one group
        Err(ParseError::NoList) if !answer.is_empty() && input.len() == 1 => {
            vec![vec![answer
                .trim_matches(|c| c == '"' || c == '\'')
                .to_string()]]
        }
        Err(e) => return Err(e.into()),
    };
    Ok(reconcile(&input, groups))
}

fn unit(v: &EmbeddingVector) -> Option<Vec<f64>> {
    let n = v.norm();
    (n > 0.0).then(|| v.values().iter().map(|x| x / n).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// First-fit centroid clustering on precomputed embeddings. Each phrase, in
/// order, joins the first group whose centroid (mean of member unit vectors)
/// has cosine similarity ≥ `tau`, else starts a new group.
pub fn greedy_cluster_vectors<S: AsRef<str>>(
    phrases: &[S],
    vectors: &[EmbeddingVector],
    tau: f64,
) -> Result<CriteriaClustering, ClusterError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ClusterError::BadTau(tau));
    }
    if phrases.len() != vectors.len() {
        return Err(ClusterError::Length(phrases.len(), vectors.len()));
    }
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut seen = BTreeSet::new();
    for (phrase, vector) in phrases.iter().zip(vectors) {
        let phrase = phrase.as_ref().trim();
        if phrase.is_empty() || !seen.insert(normalize_phrase(phrase)) {
            continue;
        }
        let u = unit(vector).ok_or_else(|| ClusterError::ZeroEmbedding(phrase.to_string()))?;
        // centroid direction equals the direction of the member sum
        match sums.iter().position(|s| cosine(s, &u) >= tau) {
            Some(g) => {
                groups[g].push(phrase.to_string());
                for (acc, x) in sums[g].iter_mut().zip(&u) {
                    *acc += x;
                }
            }
            None => {
                groups.push(vec![phrase.to_string()]);
                sums.push(u);
            }
        }
    }
    Ok(CriteriaClustering {
        groups,
        ungrouped: Vec::new(),
        method: ClusterMethod::EmbeddingGreedy,
        tau: Some(tau),
        warnings: Vec::new(),
    })
}

/// Embeds the deduplicated phrases and runs [`greedy_cluster_vectors`].
pub fn greedy_embed_cluster<S: AsRef<str>>(
    embedder: &dyn EmbeddingProvider,
    phrases: &[S],
    tau: f64,
) -> Result<CriteriaClustering, ClusterError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ClusterError::BadTau(tau));
    }
    let input = dedup_phrases(phrases);
    if input.is_empty() {
        let mut c = CriteriaClustering::empty(ClusterMethod::EmbeddingGreedy);
        c.tau = Some(tau);
        return Ok(c);
    }
    let vectors = embedder.embed_texts(&input)?;
    greedy_cluster_vectors(&input, &vectors, tau)
}

/// Number of distinct clusters touched by the criteria of opinions with the
/// given stance.
pub fn count_unique_clusters(
    statement_id: &str,
    clustering: &CriteriaClustering,
    opinions: &[Opinion],
    stance: Stance,
    mode: CountingMode,
) -> Result<ClusterCount, ClusterError> {
    let index = clustering.index();
    let mut groups = BTreeSet::new();
    let mut singles = BTreeSet::new();
    for op in opinions.iter().filter(|o| o.stance == stance) {
        for phrase in &op.criteria {
            let key = normalize_phrase(phrase);
            if key.is_empty() {
                continue;
            }
            match index.get(&key) {
                Some(Disposition::Group(g)) => {
                    groups.insert(*g);
                }
                Some(Disposition::Ungrouped(u)) => {
                    singles.insert(*u);
                }
                None => return Err(ClusterError::NoDisposition(phrase.clone())),
            }
        }
    }
    let unique_clusters = match mode {
        CountingMode::DropUngrouped => groups.len(),
        CountingMode::SingletonUngrouped => groups.len() + singles.len(),
    };
    Ok(ClusterCount {
        statement_id: statement_id.to_string(),
        stance,
        unique_clusters,
        counting_mode: mode,
    })
}
