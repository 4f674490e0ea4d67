//! Statement corpora: loading from CSV / JSON-lines and deterministic sampling.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus file not found: {0}")]
    MissingFile(String),
    #[error("failed to read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: missing field {field:?}")]
    MissingField { row: usize, field: String },
    #[error("row {row}: field {field:?} is not a string")]
    NotAString { row: usize, field: String },
    #[error("row {row}: malformed record: {message}")]
    Malformed { row: usize, message: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unsupported corpus format for {0} (expected .csv or .jsonl)")]
    UnsupportedFormat(String),
    #[error("sample size {requested} is invalid for a corpus of {available} statements")]
    SampleSize { requested: usize, available: usize },
}

/// The kind of subjective task a statement poses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    /// Agree / Disagree with a statement.
    Stance,
    /// Hate speech / not hate speech labeling.
    Labeling,
    /// Story continuation; no stance.
    Generation,
}

impl TaskType {
    pub const ALL: [TaskType; 3] = [TaskType::Stance, TaskType::Labeling, TaskType::Generation];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Stance => "stance",
            TaskType::Labeling => "labeling",
            TaskType::Generation => "generation",
        }
    }

    pub fn has_stance(self) -> bool {
        !matches!(self, TaskType::Generation)
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stance" => Ok(TaskType::Stance),
            "labeling" | "labelling" => Ok(TaskType::Labeling),
            "generation" => Ok(TaskType::Generation),
            other => Err(format!("unknown task type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub id: String,
    pub text: String,
    pub dataset_tag: String,
    pub task_type: TaskType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub statements: Vec<Statement>,
    pub source_path: String,
    /// Rows skipped while loading (blank text).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Statement> {
        self.statements.iter().find(|s| s.id == id)
    }

    /// Content fingerprint over ids and texts, used to check that two runs
    /// share a corpus.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for s in &self.statements {
            hasher.update(s.id.as_bytes());
            hasher.update([0u8]);
            hasher.update(s.text.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }
}

/// Options controlling how rows map to statements.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub task_type: TaskType,
    pub text_field: String,
    /// Column holding explicit ids. When absent from the file, ids fall back
    /// to `<filename>:<line>`.
    pub id_field: String,
    pub dataset_tag: Option<String>,
}

impl LoadOptions {
    pub fn new(task_type: TaskType, text_field: impl Into<String>) -> Self {
        Self {
            task_type,
            text_field: text_field.into(),
            id_field: "id".to_string(),
            dataset_tag: None,
        }
    }
}

struct RawRow {
    line: usize,
    id: Option<String>,
    text: String,
}

pub fn load_corpus(
    path: impl AsRef<Path>,
    task_type: TaskType,
    text_field: &str,
) -> Result<Corpus, CorpusError> {
    load_corpus_with(path, &LoadOptions::new(task_type, text_field))
}

pub fn load_corpus_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(CorpusError::MissingFile(path.display().to_string()));
    }
    let file_name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let rows = match ext.as_str() {
        "csv" => read_csv(path, opts)?,
        "jsonl" | "ndjson" | "json" => read_jsonl(path, opts)?,
        _ => return Err(CorpusError::UnsupportedFormat(path.display().to_string())),
    };

    let dataset_tag = opts.dataset_tag.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let mut seen = HashSet::new();
    let mut statements = Vec::with_capacity(rows.len());
    let mut warnings = Vec::new();
    for row in rows {
        let id = row
            .id
            .unwrap_or_else(|| format!("{file_name}:{}", row.line));
        if row.text.trim().is_empty() {
            warnings.push(format!("{id}: empty text, row skipped"));
            continue;
        }
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        statements.push(Statement {
            id,
            text: row.text,
            dataset_tag: dataset_tag.clone(),
            task_type: opts.task_type,
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Corpus {
        statements,
        source_path: path.display().to_string(),
        warnings,
    })
}

fn read_csv(path: &Path, opts: &LoadOptions) -> Result<Vec<RawRow>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CorpusError::Malformed {
            row: 0,
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Malformed {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let text_col = headers
        .iter()
        .position(|h| h == opts.text_field)
        .ok_or_else(|| CorpusError::MissingField {
            row: 0,
            field: opts.text_field.clone(),
        })?;
    let id_col = headers.iter().position(|h| h == opts.id_field);

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| CorpusError::Malformed {
            row: line,
            message: e.to_string(),
        })?;
        let text = record
            .get(text_col)
            .ok_or_else(|| CorpusError::MissingField {
                row: line,
                field: opts.text_field.clone(),
            })?
            .to_string();
        let id = id_col
            .and_then(|c| record.get(c))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        rows.push(RawRow { line, id, text });
    }
    Ok(rows)
}

fn read_jsonl(path: &Path, opts: &LoadOptions) -> Result<Vec<RawRow>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                row: line_no,
                message: e.to_string(),
            })?;
        let text = match value.get(&opts.text_field) {
            None => {
                return Err(CorpusError::MissingField {
                    row: line_no,
                    field: opts.text_field.clone(),
                })
            }
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Null) => String::new(),
            Some(_) => {
                return Err(CorpusError::NotAString {
                    row: line_no,
                    field: opts.text_field.clone(),
                })
            }
        };
        let id = match value.get(&opts.id_field) {
            Some(serde_json::Value::String(s)) if !s.trim().is_empty() => {
                Some(s.trim().to_string())
            }
            Some(serde_json::Value::Number(n)) => Some(n.to_string()),
            _ => None,
        };
        rows.push(RawRow {
            line: line_no,
            id,
            text,
        });
    }
    Ok(rows)
}

/// Deterministic subset of `n` statements, preserving source order.
pub fn sample_statements(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus, CorpusError> {
    if n == 0 || n > corpus.len() {
        return Err(CorpusError::SampleSize {
            requested: n,
            available: corpus.len(),
        });
    }
    let mut picked: Vec<usize> = if n == corpus.len() {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, corpus.len(), n).into_vec()
    };
    picked.sort_unstable();
    Ok(Corpus {
        statements: picked
            .into_iter()
            .map(|i| corpus.statements[i].clone())
            .collect(),
        source_path: corpus.source_path.clone(),
        warnings: corpus.warnings.clone(),
    })
}

/// Writes a corpus back out as JSON-lines with explicit `id` and `text` fields.
pub fn write_corpus_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for s in &corpus.statements {
        let line = serde_json::json!({ "id": s.id, "text": s.text });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn jsonl_ids_follow_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "acts.jsonl",
            "{\"action\": \"a\"}\n{\"action\": \"b\"}\n{\"action\": \"c\"}\n",
        );
        let c = load_corpus(&p, TaskType::Stance, "action").unwrap();
        let ids: Vec<_> = c.statements.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["acts.jsonl:1", "acts.jsonl:2", "acts.jsonl:3"]);
        assert_eq!(c.statements[1].text, "b");
        assert_eq!(c.statements[0].dataset_tag, "acts");
    }

    #[test]
    fn blank_rows_are_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "s.jsonl",
            "{\"t\": \"a\"}\n{\"t\": \"b\"}\n{\"t\": \"   \"}\n{\"t\": \"d\"}\n{\"t\": \"e\"}\n",
        );
        let c = load_corpus(&p, TaskType::Stance, "t").unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.warnings.len(), 1);
        assert_eq!(c.statements[2].id, "s.jsonl:4");
    }

    #[test]
    fn csv_duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "s.csv",
            "id,text\nx,\"hello, world\"\ny,two\nx,three\n",
        );
        let err = load_corpus(&p, TaskType::Stance, "text").unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");
    }

    #[test]
    fn csv_quoting_and_explicit_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "s.csv",
            "id,title\nq1,\"He said \"\"no\"\", twice\"\nq2,plain\n",
        );
        let c = load_corpus(&p, TaskType::Stance, "title").unwrap();
        assert_eq!(c.statements[0].id, "q1");
        assert_eq!(c.statements[0].text, "He said \"no\", twice");
    }

    #[test]
    fn missing_field_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.jsonl", "{\"other\": \"a\"}\n");
        assert!(matches!(
            load_corpus(&p, TaskType::Stance, "text"),
            Err(CorpusError::MissingField { .. })
        ));
        assert!(matches!(
            load_corpus(dir.path().join("nope.jsonl"), TaskType::Stance, "text"),
            Err(CorpusError::MissingFile(_))
        ));
    }

    fn numbered(n: usize) -> Corpus {
        Corpus {
            statements: (0..n)
                .map(|i| Statement {
                    id: format!("s:{i}"),
                    text: format!("statement {i}"),
                    dataset_tag: "t".into(),
                    task_type: TaskType::Stance,
                })
                .collect(),
            source_path: "mem".into(),
            warnings: vec![],
        }
    }

    #[test]
    fn full_sample_is_identity() {
        let c = numbered(17);
        assert_eq!(sample_statements(&c, 17, 3).unwrap(), c);
    }

    #[test]
    fn sampling_is_deterministic_unique_and_ordered() {
        let c = numbered(500);
        let a = sample_statements(&c, 200, 42).unwrap();
        let b = sample_statements(&c, 200, 42).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<_> = a.statements.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 200);
        let positions: Vec<usize> = a
            .statements
            .iter()
            .map(|s| c.statements.iter().position(|t| t.id == s.id).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, sample_statements(&c, 200, 43).unwrap());
    }

    #[test]
    fn oversample_rejected() {
        let c = numbered(3);
        assert!(sample_statements(&c, 4, 0).is_err());
        assert!(sample_statements(&c, 0, 0).is_err());
    }

    #[test]
    fn write_load_sample_round_trip_preserves_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "u.jsonl",
            "{\"text\": \"caf\\u00e9 \\\"quoted\\\"  spaced \"}\n{\"text\": \"line\\ttab\"}\n{\"text\": \"\\u4f60\\u597d\"}\n",
        );
        let c = load_corpus(&p, TaskType::Stance, "text").unwrap();
        let s = sample_statements(&c, 2, 9).unwrap();
        let out = dir.path().join("out.jsonl");
        write_corpus_jsonl(&s, &out).unwrap();
        let back = load_corpus(&out, TaskType::Stance, "text").unwrap();
        let texts: Vec<_> = back.statements.iter().map(|s| s.text.clone()).collect();
        let orig: Vec<_> = s.statements.iter().map(|s| s.text.clone()).collect();
        assert_eq!(texts, orig);
    }
}
