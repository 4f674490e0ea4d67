use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use divex_cli::{execute, load_report, Backend, Cli};
use divex_core::orchestrator::{OpinionSet, RecallTrace};
use divex_core::parser::{render_opinions, render_record, Opinion, Stance};
use divex_core::provider::{ProviderError, ScriptedProvider};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn divex(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divex"))
        .arg("--runs-dir")
        .arg(runs)
        .args(args)
        .env_remove("DIVEX_API_KEY")
        .output()
        .expect("spawn divex")
}

fn replay(runs: &Path, args: &[&str]) -> Output {
    let f = fixtures();
    let mut full = vec![
        "--config".to_string(),
        f.join("divex.json").display().to_string(),
        "--fixtures".into(),
        f.join("recordings").display().to_string(),
    ];
    full.extend(args.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = full.iter().map(String::as_str).collect();
    divex(runs, &refs)
}

fn demo_corpus() -> String {
    fixtures().join("corpora/demo.jsonl").display().to_string()
}

fn lines<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_corpus(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    let body: String = (1..=n)
        .map(|i| format!("{{\"id\": \"q{i}\", \"text\": \"Statement number {i}.\"}}\n"))
        .collect();
    std::fs::write(&path, body).unwrap();
    path
}

fn run_with(backend: &Backend, runs: &Path, args: &[&str]) -> anyhow::Result<()> {
    let mut full = vec!["divex", "--runs-dir", runs.to_str().unwrap()];
    full.extend_from_slice(args);
    execute(&Cli::try_parse_from(&full)?, Some(backend))
}

fn scripted(
    chat: impl Fn(&str) -> Result<String, ProviderError> + Send + Sync + 'static,
) -> Backend {
    let embed = |t: &str| {
        let b = t
            .bytes()
            .fold(7u64, |h, c| h.wrapping_mul(31).wrapping_add(c as u64));
        (0..4)
            .map(|k| ((b >> (k * 8)) & 0xff) as f64 + 1.0)
            .collect()
    };
    Backend::new(
        "scripted",
        Box::new(ScriptedProvider::new("chat").with_chat(chat)),
        Box::new(ScriptedProvider::new("embed").with_embed(embed)),
    )
}

#[test]
fn missing_corpus_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = divex(dir.path(), &["gen"]);
    assert_eq!(out.status.code(), Some(2));
    let out = divex(dir.path(), &["gen", "--corpus", "no/such/file.jsonl"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn bad_schedule_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for schedule in ["5,2", "2,x", "0"] {
        let out = divex(
            dir.path(),
            &[
                "--offline",
                "recall",
                "--corpus",
                &demo_corpus(),
                "--schedule",
                schedule,
            ],
        );
        assert_eq!(out.status.code(), Some(2), "schedule {schedule}");
    }
    assert!(
        std::fs::read_dir(dir.path()).unwrap().next().is_none(),
        "no run directory is created"
    );
}

#[test]
fn reports_over_different_corpora_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let golden = fixtures().join("expected/demo-criteria.report.json");
    let mut other = json(&golden);
    other["corpus_fingerprint"] = "0000".into();
    other["run_id"] = "other".into();
    let other_path = dir.path().join("other.json");
    std::fs::write(&other_path, other.to_string()).unwrap();
    let out = divex(
        dir.path(),
        &[
            "report",
            golden.to_str().unwrap(),
            other_path.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different corpora"));

    let same = fixtures().join("expected/demo-freeform.report.json");
    let out = divex(
        dir.path(),
        &["report", golden.to_str().unwrap(), same.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("| Metric | Criteria | Free-form |"));
}

#[test]
fn free_form_run_has_no_criteria_until_extraction() {
    let dir = tempfile::tempdir().unwrap();
    let out = replay(
        dir.path(),
        &[
            "--run-id",
            "ff",
            "gen",
            "--corpus",
            &demo_corpus(),
            "--mode",
            "freeform",
            "--shots",
            "1",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = dir.path().join("ff");
    let sets: Vec<OpinionSet> = lines(&run.join("opinions.jsonl"));
    assert_eq!(sets.len(), 20);
    assert!(sets
        .iter()
        .flat_map(|s| &s.opinions)
        .all(|o| o.criteria.is_empty()));
    assert!(run.join("raw/s001.txt").exists());

    let out = replay(dir.path(), &["extract-criteria", run.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let extracted: Vec<OpinionSet> = lines(&run.join("criteria.jsonl"));
    assert!(extracted
        .iter()
        .flat_map(|s| &s.opinions)
        .any(|o| !o.criteria.is_empty()));
    let manifest = json(&run.join("manifest.json"));
    let commands: Vec<&str> = manifest["commands"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["command"].as_str().unwrap())
        .collect();
    assert_eq!(commands, ["gen", "extract-criteria"]);
}

#[test]
fn metric_filter_and_versioned_rescore() {
    let dir = tempfile::tempdir().unwrap();
    let out = replay(
        dir.path(),
        &[
            "--run-id",
            "cb",
            "gen",
            "--corpus",
            &demo_corpus(),
            "--shots",
            "1",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = dir.path().join("cb");
    let out = replay(
        dir.path(),
        &["score", run.to_str().unwrap(), "--metric", "semantic"],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let first = json(&run.join("report.json"));
    assert!(first["semantic"].is_object());
    for absent in ["perspective", "lexical", "balance"] {
        assert!(first.get(absent).is_none(), "{absent} present");
    }
    assert!(!run.join("clusters.jsonl").exists());
    let csv = std::fs::read_to_string(run.join("embeddings.csv")).unwrap();
    assert!(csv.starts_with("id,stance,source,d0,"));
    assert_eq!(csv.lines().count(), 1 + 198);

    let out = replay(
        dir.path(),
        &[
            "score",
            run.to_str().unwrap(),
            "--metric",
            "lexical",
            "--ngram",
            "2",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        json(&run.join("report.json")),
        first,
        "earlier report untouched"
    );
    let second = json(&run.join("report.v2.json"));
    assert!(second.get("semantic").is_none());
    assert_eq!(
        second["lexical"]["mean"]["agree"]
            .as_object()
            .unwrap()
            .keys()
            .collect::<Vec<_>>(),
        ["2"]
    );
    assert!(run.join("report.v2.md").exists());
    assert_eq!(load_report(&run).unwrap().run_id, "cb");

    let out = replay(
        dir.path(),
        &["score", run.to_str().unwrap(), "--metric", "bogus"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_opinion_statements_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 3);
    let backend = scripted(|_| {
        Ok(render_opinions(
            &[Opinion::new(
                1,
                Stance::Agree,
                &["safety"],
                "Only one view.",
            )],
            true,
        ))
    });
    let runs = dir.path().join("runs");
    run_with(
        &backend,
        &runs,
        &[
            "--run-id",
            "one",
            "gen",
            "--corpus",
            corpus.to_str().unwrap(),
            "--shots",
            "0",
        ],
    )
    .unwrap();
    run_with(
        &backend,
        &runs,
        &[
            "score",
            runs.join("one").to_str().unwrap(),
            "--metric",
            "semantic,balance",
        ],
    )
    .unwrap();
    let report = load_report(&runs.join("one")).unwrap();
    let semantic = report.semantic.unwrap();
    assert_eq!(semantic.skipped, ["q1", "q2", "q3"]);
    assert!(semantic.corpus.is_none());
    assert!(semantic.per_statement.is_empty());
    assert_eq!(report.balance.unwrap().imbalanced_fraction, 1.0);
}

#[test]
fn run_with_no_opinions_fails_but_keeps_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 2);
    let backend = scripted(|_| Err(ProviderError::other("model unavailable")));
    let runs = dir.path().join("runs");
    let err = run_with(
        &backend,
        &runs,
        &[
            "--run-id",
            "dead",
            "gen",
            "--corpus",
            corpus.to_str().unwrap(),
            "--shots",
            "0",
        ],
    )
    .unwrap_err();
    assert_eq!(divex_cli::exit_code(&err), divex_cli::EXIT_RUNTIME);
    let manifest = json(&runs.join("dead/manifest.json"));
    assert_eq!(manifest["statements"]["q1"]["status"], "failed");
    assert!(manifest["statements"]["q2"]["error"]
        .as_str()
        .unwrap()
        .contains("model unavailable"));
}

#[test]
fn recall_run_scores_a_saturation_curve() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 2);
    let op = |i: usize| {
        let stance = if i % 2 == 1 {
            Stance::Agree
        } else {
            Stance::Disagree
        };
        Opinion::new(
            i as u32,
            stance,
            &[&format!("value {}", i % 4)],
            &format!("Reason {i} differs."),
        )
    };
    let backend = scripted(move |p| {
        if p.starts_with("Group all") {
            return Ok("[[\"value 0\", \"value 2\"], [\"value 1\"], [\"value 3\"]]".into());
        }
        if !p.contains("Output:\n{") {
            return Ok(format!("{{1: {}}}", render_record(&op(1), true)));
        }
        let next: usize = p
            .rsplit(", ")
            .next()
            .unwrap()
            .split(':')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        let mut out = render_record(&op(next), true)
            .split_once("\"Stance\":")
            .unwrap()
            .1
            .to_string();
        out.push_str(&format!(
            ", {}: {}}}",
            next + 1,
            render_record(&op(next + 1), true)
        ));
        Ok(out)
    });
    let runs = dir.path().join("runs");
    run_with(
        &backend,
        &runs,
        &[
            "--run-id",
            "rc",
            "recall",
            "--corpus",
            corpus.to_str().unwrap(),
            "--schedule",
            "2,5",
        ],
    )
    .unwrap();
    let traces: Vec<RecallTrace> = lines(&runs.join("rc/traces.jsonl"));
    assert_eq!(traces.len(), 2);
    assert_eq!(traces[0].steps.len(), 2);
    assert!(std::fs::read_to_string(runs.join("rc/raw/q1.txt"))
        .unwrap()
        .contains("### n=5"));
    run_with(
        &backend,
        &runs,
        &["score", runs.join("rc").to_str().unwrap()],
    )
    .unwrap();
    let report = load_report(&runs.join("rc")).unwrap();
    assert_eq!(report.kind, "recall");
    assert!(report.prompt_mode.is_none());
    let curve = report.recall_curve.unwrap();
    assert_eq!(curve.iter().map(|p| p.n).collect::<Vec<_>>(), [2, 5]);
    assert!(curve[1].mean_opinions >= curve[0].mean_opinions);
}

#[test]
fn api_key_never_reaches_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let secret = "sk-test-do-not-log-42";
    let out = Command::new(env!("CARGO_BIN_EXE_divex"))
        .args(["--runs-dir", dir.path().to_str().unwrap(), "--run-id", "k"])
        .args([
            "--base-url",
            "http://127.0.0.1:9",
            "--max-retries",
            "0",
            "--timeout-ms",
            "500",
        ])
        .args([
            "gen",
            "--corpus",
            &demo_corpus(),
            "--sample",
            "2",
            "--shots",
            "0",
        ])
        .env("DIVEX_API_KEY", secret)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut seen = 0;
    for entry in walk(dir.path()) {
        let text = std::fs::read_to_string(&entry).unwrap_or_default();
        assert!(
            !text.contains(secret),
            "{} contains the key",
            entry.display()
        );
        seen += 1;
    }
    assert!(seen >= 2);
    assert!(!String::from_utf8_lossy(&out.stderr).contains(secret));
    let manifest = json(&dir.path().join("k/manifest.json"));
    assert_eq!(manifest["backend"], "http");
    assert!(manifest["config_sources"]
        .as_object()
        .unwrap()
        .keys()
        .all(|k| !k.contains("key")));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, format!("{{\"api_key\": \"{secret}\"}}")).unwrap();
    let out = divex(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "cache", "stats"],
    );
    assert_eq!(out.status.code(), Some(2));
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn offline_mode_serves_only_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let out = divex(
        dir.path(),
        &[
            "--offline",
            "--run-id",
            "off",
            "gen",
            "--corpus",
            &demo_corpus(),
            "--sample",
            "1",
            "--shots",
            "0",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let manifest = json(&dir.path().join("off/manifest.json"));
    let status = manifest["statements"]
        .as_object()
        .unwrap()
        .values()
        .next()
        .unwrap()
        .clone();
    assert!(
        status["error"].as_str().unwrap().contains("offline"),
        "{status}"
    );

    let out = divex(dir.path(), &["cache", "stats"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["chat_entries"], 0);
}
