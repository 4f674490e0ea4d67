use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::TaskType;
use crate::prompting::PromptMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceCounts {
    pub counts: BTreeMap<String, usize>,
    pub imbalanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub per_statement: BTreeMap<String, StanceCounts>,
    pub imbalanced_statements: usize,
    pub total_statements: usize,
    pub imbalanced_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticSection {
    /// Mean over scored statements; `None` when every statement was skipped.
    pub corpus: Option<f64>,
    pub per_statement: BTreeMap<String, f64>,
    /// Statements with fewer than two reasons.
    pub skipped: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_stance: Option<BTreeMap<String, BTreeMap<String, f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveSection {
    pub cluster_method: String,
    pub counting_mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub per_statement: BTreeMap<String, BTreeMap<String, usize>>,
    pub mean_per_stance: BTreeMap<String, f64>,
    pub ungrouped_phrases: usize,
    pub total_phrases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalSection {
    /// statement → stance group → n → score
    pub per_statement: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>,
    /// stance group → n → mean over statements
    pub mean: BTreeMap<String, BTreeMap<String, f64>>,
}

/// One point of a diversity-vs-N curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub statements: usize,
    pub mean_opinions: f64,
    pub mean_clusters: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub run_id: String,
    pub kind: String,
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_mode: Option<PromptMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    pub model_id: String,
    pub embedding_model_id: String,
    pub corpus_fingerprint: String,
    pub statements: usize,
    pub opinion_counts: BTreeMap<String, usize>,
    pub average_opinion_count: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<SemanticSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perspective: Option<PerspectiveSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexical: Option<LexicalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance: Option<BalanceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_curve: Option<Vec<CurvePoint>>,
}

impl DiversityReport {
    /// Column label for comparison tables.
    pub fn label(&self) -> String {
        match (self.prompt_mode, self.shots) {
            (Some(m), Some(0)) => format!("{} (zero-shot)", m.display_name()),
            (Some(m), _) => m.display_name().to_string(),
            _ => format!("Recall ({})", self.model_id),
        }
    }

    /// Metric rows `(name, value)` shared by the single-run and comparison
    /// tables.
    pub fn rows(&self) -> Vec<(String, Option<f64>)> {
        let mut rows = vec![(
            "Average opinions per statement".to_string(),
            Some(self.average_opinion_count),
        )];
        if let Some(s) = &self.semantic {
            rows.push(("Semantic diversity (cosine distance)".to_string(), s.corpus));
        }
        if let Some(p) = &self.perspective {
            for (stance, v) in &p.mean_per_stance {
                rows.push((format!("Unique criteria clusters ({stance})"), Some(*v)));
            }
        }
        if let Some(l) = &self.lexical {
            for (stance, by_n) in &l.mean {
                for (n, v) in by_n {
                    rows.push((format!("Lexical diversity {n}-gram ({stance})"), Some(*v)));
                }
            }
        }
        if let Some(b) = &self.balance {
            rows.push((
                "Imbalanced statements (fraction)".to_string(),
                Some(b.imbalanced_fraction),
            ));
        }
        rows
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Diversity report: {}\n", self.run_id);
        let _ = writeln!(
            out,
            "Model `{}`, task `{}`, {} statements.\n",
            self.model_id, self.task_type, self.statements
        );
        out.push_str(&comparison_markdown(std::slice::from_ref(self)));
        if let Some(s) = &self.semantic {
            if !s.skipped.is_empty() {
                let _ = writeln!(
                    out,
                    "\nSkipped for semantic diversity (fewer than 2 reasons): {}",
                    s.skipped.join(", ")
                );
            }
        }
        if let Some(curve) = &self.recall_curve {
            out.push_str("\n## Unique criteria clusters vs. number of generated opinions\n\n");
            out.push_str(&curve_markdown(curve));
        }
        out
    }
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Metric-by-run table; one column per report.
pub fn comparison_markdown(reports: &[DiversityReport]) -> String {
    let mut names: Vec<String> = Vec::new();
    for r in reports {
        for (name, _) in r.rows() {
            if !names.contains(&name) {
                names.push(name);
            }
        }
    }
    let mut out = String::new();
    let headers: Vec<String> = reports.iter().map(DiversityReport::label).collect();
    let _ = writeln!(out, "| Metric | {} |", headers.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(reports.len()));
    for name in names {
        let cells: Vec<String> = reports
            .iter()
            .map(|r| {
                fmt_value(
                    r.rows()
                        .into_iter()
                        .find(|(n, _)| *n == name)
                        .and_then(|(_, v)| v),
                )
            })
            .collect();
        let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
    }
    out
}

fn curve_markdown(curve: &[CurvePoint]) -> String {
    let stances: Vec<String> = curve
        .first()
        .map(|p| p.mean_clusters.keys().cloned().collect())
        .unwrap_or_default();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| N | statements | mean opinions | {} |",
        stances.join(" | ")
    );
    let _ = writeln!(out, "|---|---|---|{}", "---|".repeat(stances.len()));
    for p in curve {
        let cells: Vec<String> = stances
            .iter()
            .map(|s| fmt_value(p.mean_clusters.get(s).copied()))
            .collect();
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {} |",
            p.n,
            p.statements,
            p.mean_opinions,
            cells.join(" | ")
        );
    }
    out
}

/// `label,n,stance,mean_clusters` rows for plotting curves from several runs.
pub fn curves_csv(reports: &[DiversityReport]) -> String {
    let mut out = String::from("run,n,stance,mean_unique_clusters,mean_opinions\n");
    for r in reports {
        for p in r.recall_curve.iter().flatten() {
            for (stance, v) in &p.mean_clusters {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.run_id, p.n, stance, v, p.mean_opinions
                );
            }
        }
    }
    out
}
