//! Run directory layout and the run manifest.
//!
//! ```text
//! <runs>/<run-id>/
//!   manifest.json      config snapshot, per-statement status, command log
//!   corpus.jsonl       statements as loaded
//!   opinions.jsonl     one OpinionSet per statement
//!   traces.jsonl       recall runs only
//!   raw/<id>.txt       raw completions
//!   criteria.jsonl     opinions with extracted criteria
//!   clusters.jsonl     one clustering per statement
//!   report.json, report.md, embeddings.csv
//! ```
//!
//! Derived files are never overwritten: a second scoring pass writes
//! `report.v2.json` and so on.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use divex_core::orchestrator::RunConfig;
use divex_core::provider::ProviderConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementStatus {
    /// "pending", "ok", "empty" or "failed".
    pub status: String,
    #[serde(default)]
    pub opinions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StatementStatus {
    pub fn pending() -> Self {
        Self {
            status: "pending".into(),
            opinions: 0,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command: String,
    pub at: String,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub options: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub path: String,
    pub fingerprint: String,
    pub statements: usize,
}

/// Everything needed to reproduce a run. Credentials are never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub run_id: String,
    /// "gen" or "recall".
    pub kind: String,
    pub created_at: String,
    /// "fixtures", "offline" or "http".
    pub backend: String,
    pub config: RunConfig,
    pub embedding: ProviderConfig,
    pub config_sources: BTreeMap<String, String>,
    pub corpus: CorpusInfo,
    pub statements: BTreeMap<String, StatementStatus>,
    #[serde(default)]
    pub commands: Vec<CommandRecord>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates a fresh run directory. An existing run is never reused.
    pub fn create(runs_dir: &Path, run_id: &str) -> Result<Self> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(UsageError(format!("invalid run id {run_id:?}")).into());
        }
        let root = runs_dir.join(run_id);
        if root.join(MANIFEST).exists() {
            return Err(
                UsageError(format!("run directory {} already exists", root.display())).into(),
            );
        }
        fs::create_dir_all(root.join("raw"))
            .with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.join(MANIFEST).is_file() {
            return Err(UsageError(format!(
                "{} is not a run directory (no {MANIFEST})",
                path.display()
            ))
            .into());
        }
        Ok(Self {
            root: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let path = self.file(MANIFEST);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write_manifest(&self, m: &RunManifest) -> Result<()> {
        self.write_json(MANIFEST, m)
    }

    /// Appends a command record to the manifest.
    pub fn log_command(&self, record: CommandRecord) -> Result<()> {
        let mut m = self.manifest()?;
        m.commands.push(record);
        self.write_manifest(&m)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.file(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.file(name);
        let mut out = BufWriter::new(
            fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?,
        );
        for row in rows {
            serde_json::to_writer(&mut out, row)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>> {
        let path = self.file(name);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
            })
            .collect()
    }

    /// Newest existing version of `stem.ext`, if any.
    pub fn latest(&self, stem: &str, ext: &str) -> Option<String> {
        let mut best = None;
        for v in 1.. {
            let name = versioned(stem, ext, v);
            if !self.file(&name).exists() {
                break;
            }
            best = Some(name);
        }
        best
    }

    /// First unused version of `stem.ext`.
    pub fn next_version(&self, stem: &str, ext: &str) -> String {
        (1..)
            .map(|v| versioned(stem, ext, v))
            .find(|n| !self.file(n).exists())
            .expect("unbounded range")
    }

    /// Version number shared by a group of outputs written together, so
    /// `report.v2.json` and `report.v2.md` line up.
    pub fn next_shared_version(&self, names: &[(&str, &str)]) -> u32 {
        (1..)
            .find(|&v| {
                names
                    .iter()
                    .all(|(s, e)| !self.file(&versioned(s, e, v)).exists())
            })
            .expect("unbounded range")
    }
}

pub fn versioned(stem: &str, ext: &str, version: u32) -> String {
    if version <= 1 {
        format!("{stem}.{ext}")
    } else {
        format!("{stem}.v{version}.{ext}")
    }
}

/// Rejects runs that should not be scored.
pub fn require_kind(m: &RunManifest, allowed: &[&str]) -> Result<()> {
    if !allowed.contains(&m.kind.as_str()) {
        bail!(
            "run {} is a {} run; expected one of {allowed:?}",
            m.run_id,
            m.kind
        );
    }
    Ok(())
}
