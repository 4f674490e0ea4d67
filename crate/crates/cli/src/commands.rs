use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use divex_core::clustering::{ClusterMethod, StatementClustering};
use divex_core::corpus::{
    load_corpus_with, sample_statements, write_corpus_jsonl, Corpus, LoadOptions,
};
use divex_core::metrics::{
    comparison_markdown, curves_csv, paired_permutation_test, DiversityReport,
};
use divex_core::orchestrator::{
    run_generation, run_recall_corpus, OpinionSet, RecallTrace, RunConfig, StatementFailure,
};
use divex_core::prompting::{
    build_opinion_prompt, default_shot_bank, load_shot_bank, PromptSpec, ShotExample, TemplateSet,
};
use divex_core::provider::ResponseCache;
use divex_core::text::file_safe;

use crate::backend::Backend;
use crate::rundir::{
    now, require_kind, versioned, CommandRecord, CorpusInfo, RunDir, RunManifest, StatementStatus,
};
use crate::score::{self, embeddings_csv, MetricSet, ScoreInputs, ScoreOptions};
use crate::settings::{Overrides, Settings};
use crate::{
    parse_schedule, CacheCommand, Cli, ClusterArgs, Command, CorpusArgs, GenArgs, GlobalArgs,
    RecallArgs, ReportArgs, RunArg, ScoreArgs, UsageError,
};

struct Session<'a> {
    global: &'a GlobalArgs,
    settings: Settings,
    templates: TemplateSet,
    injected: Option<&'a Backend>,
    owned: Option<Backend>,
}

impl Session<'_> {
    fn backend(&mut self) -> Result<&Backend> {
        if let Some(b) = self.injected {
            return Ok(b);
        }
        if self.owned.is_none() {
            self.owned = Some(Backend::select(
                &self.settings,
                self.global.fixtures.as_deref(),
                self.global.offline,
            )?);
        }
        Ok(self.owned.as_ref().expect("just set"))
    }

    fn backend_kind(&self) -> &'static str {
        match (self.injected, &self.global.fixtures, self.global.offline) {
            (Some(b), _, _) => b.kind,
            (None, Some(_), _) => "fixtures",
            (None, None, true) => "offline",
            (None, None, false) => "http",
        }
    }

    fn run_id(&self, kind: &str) -> String {
        self.global
            .run_id
            .clone()
            .unwrap_or_else(|| format!("{kind}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ")))
    }
}

fn overrides(g: &GlobalArgs) -> Overrides {
    Overrides {
        model: g.model.clone(),
        base_url: g.base_url.clone(),
        temperature: g.temperature,
        top_p: g.top_p,
        max_tokens: g.max_tokens,
        timeout_ms: g.timeout_ms,
        max_retries: g.max_retries,
        embedding_model: g.embedding_model.clone(),
        embedding_base_url: g.embedding_base_url.clone(),
        concurrency: g.concurrency,
        runs_dir: g.runs_dir.clone(),
        cache: g.cache.clone(),
        seed: g.seed,
    }
}

/// Runs one parsed command. `backend` replaces provider selection from the
/// global flags when given.
pub fn execute(cli: &Cli, backend: Option<&Backend>) -> Result<()> {
    let settings = Settings::resolve(&overrides(&cli.global), cli.global.config.as_deref())?;
    let templates = match &cli.global.templates {
        Some(dir) => TemplateSet::from_dir(dir).map_err(|e| UsageError(e.to_string()))?,
        None => TemplateSet::builtin(),
    };
    let mut s = Session {
        global: &cli.global,
        settings,
        templates,
        injected: backend,
        owned: None,
    };
    match &cli.command {
        Command::Gen(a) => cmd_gen(&mut s, a),
        Command::Recall(a) => cmd_recall(&mut s, a),
        Command::ExtractCriteria(a) => cmd_extract(&mut s, a),
        Command::Cluster(a) => cmd_cluster(&mut s, a),
        Command::Score(a) => cmd_score(&mut s, a),
        Command::Report(a) => cmd_report(a),
        Command::Cache(CacheCommand::Stats) => cmd_cache_stats(&s.settings),
    }
}

fn load_corpus(args: &CorpusArgs, seed: u64) -> Result<Corpus> {
    let opts = LoadOptions {
        task_type: args.task,
        text_field: args.text_field.clone(),
        id_field: args.id_field.clone(),
        dataset_tag: args.dataset_tag.clone(),
    };
    let corpus = load_corpus_with(&args.corpus, &opts).map_err(|e| UsageError(e.to_string()))?;
    for w in &corpus.warnings {
        log::warn!("{w}");
    }
    let corpus = match args.sample {
        Some(n) => sample_statements(&corpus, n, seed).map_err(|e| UsageError(e.to_string()))?,
        None => corpus,
    };
    if corpus.is_empty() {
        return Err(UsageError(format!(
            "corpus {} has no statements",
            args.corpus.display()
        ))
        .into());
    }
    Ok(corpus)
}

fn start_run(s: &Session, kind: &str, config: &RunConfig, corpus: &Corpus) -> Result<RunDir> {
    let run = RunDir::create(&s.settings.runs_dir, &config.run_id)?;
    write_corpus_jsonl(corpus, run.file("corpus.jsonl"))?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        run_id: config.run_id.clone(),
        kind: kind.to_string(),
        created_at: now(),
        backend: s.backend_kind().to_string(),
        config: config.clone(),
        embedding: s.settings.embedding.clone(),
        config_sources: s.settings.sources.clone(),
        corpus: CorpusInfo {
            path: config.corpus_path.clone(),
            fingerprint: corpus.fingerprint(),
            statements: corpus.len(),
        },
        statements: corpus
            .statements
            .iter()
            .map(|st| (st.id.clone(), StatementStatus::pending()))
            .collect(),
        commands: Vec::new(),
    };
    // written before any provider call
    run.write_manifest(&manifest)?;
    Ok(run)
}

fn run_config(s: &Session, spec: PromptSpec, corpus: &Path, kind: &str) -> RunConfig {
    let mut c = RunConfig::new(s.run_id(kind), spec, s.settings.provider.clone());
    c.corpus_path = corpus.display().to_string();
    c.seed = s.settings.seed;
    c.concurrency = s.settings.concurrency;
    c
}

fn finish_run(
    run: &RunDir,
    command: &str,
    sets: &[OpinionSet],
    failures: &[StatementFailure],
    outputs: Vec<String>,
) -> Result<()> {
    let mut m = run.manifest()?;
    for set in sets {
        m.statements.insert(
            set.statement_id.clone(),
            StatementStatus {
                status: if set.opinions.is_empty() {
                    "empty"
                } else {
                    "ok"
                }
                .into(),
                opinions: set.opinions.len(),
                error: set
                    .warnings
                    .iter()
                    .find(|w| w.starts_with("parse:"))
                    .cloned(),
            },
        );
    }
    for f in failures {
        m.statements.insert(
            f.statement_id.clone(),
            StatementStatus {
                status: "failed".into(),
                opinions: 0,
                error: Some(format!("{}: {}", f.stage, f.error)),
            },
        );
    }
    m.commands.push(CommandRecord {
        command: command.to_string(),
        at: now(),
        outputs,
        options: BTreeMap::new(),
    });
    run.write_manifest(&m)?;
    let ok = sets.iter().filter(|s| !s.opinions.is_empty()).count();
    println!(
        "{}: {ok} of {} statements produced opinions",
        run.path().display(),
        m.statements.len()
    );
    if ok == 0 {
        bail!("no statement produced any opinions");
    }
    Ok(())
}

fn shot_bank(args: &GenArgs) -> Result<Vec<ShotExample>> {
    match &args.shot_bank {
        Some(p) => load_shot_bank(p).map_err(|e| UsageError(e.to_string()).into()),
        None => Ok(default_shot_bank()),
    }
}

fn cmd_gen(s: &mut Session, a: &GenArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus, s.settings.seed)?;
    let bank = shot_bank(a)?;
    let spec = PromptSpec::new(a.mode, a.shots, a.corpus.task);
    build_opinion_prompt(&s.templates, &spec, &corpus.statements[0], &bank)
        .map_err(|e| UsageError(e.to_string()))?;
    let config = run_config(s, spec, &a.corpus.corpus, "gen");
    s.backend()?;
    let run = start_run(s, "gen", &config, &corpus)?;
    let templates = s.templates.clone();
    let out = run_generation(
        &config,
        s.backend()?.chat.as_ref(),
        &templates,
        &bank,
        &corpus,
    )?;
    for set in &out.sets {
        run.write_text(&set.raw_completion_ref, &set.raw_completion)?;
    }
    run.write_jsonl("opinions.jsonl", &out.sets)?;
    finish_run(
        &run,
        "gen",
        &out.sets,
        &out.failures,
        vec!["opinions.jsonl".into()],
    )
}

fn cmd_recall(s: &mut Session, a: &RecallArgs) -> Result<()> {
    let schedule = parse_schedule(&a.schedule)?;
    let corpus = load_corpus(&a.corpus, s.settings.seed)?;
    let spec = PromptSpec::new(divex_core::PromptMode::CriteriaBased, 0, a.corpus.task);
    let mut config = run_config(s, spec, &a.corpus.corpus, "recall");
    config.recall_schedule = schedule;
    s.backend()?;
    let run = start_run(s, "recall", &config, &corpus)?;
    let templates = s.templates.clone();
    let out = run_recall_corpus(&config, s.backend()?.chat.as_ref(), &templates, &corpus)?;
    for t in &out.traces {
        run.write_text(
            &format!("raw/{}.txt", file_safe(&t.statement_id)),
            &t.raw_transcript(),
        )?;
        if let Some(reason) = &t.aborted {
            log::warn!("{}: recall aborted: {reason}", t.statement_id);
        }
    }
    run.write_jsonl("traces.jsonl", &out.traces)?;
    let sets: Vec<OpinionSet> = out.traces.iter().map(RecallTrace::to_opinion_set).collect();
    run.write_jsonl("opinions.jsonl", &sets)?;
    finish_run(
        &run,
        "recall",
        &sets,
        &out.failures,
        vec!["traces.jsonl".into(), "opinions.jsonl".into()],
    )
}

/// Opinion sets to score: the newest criteria file, else the raw opinions.
fn load_sets(run: &RunDir) -> Result<(Vec<OpinionSet>, String)> {
    let name = run
        .latest("criteria", "jsonl")
        .unwrap_or_else(|| "opinions.jsonl".to_string());
    let sets: Vec<OpinionSet> = run.read_jsonl(&name)?;
    if sets.is_empty() {
        bail!("run {} has no opinion sets", run.path().display());
    }
    Ok((sets, name))
}

fn write_extracted(run: &RunDir, sets: &[OpinionSet]) -> Result<String> {
    let name = run.next_version("criteria", "jsonl");
    run.write_jsonl(&name, sets)?;
    Ok(name)
}

fn record(
    run: &RunDir,
    command: &str,
    outputs: Vec<String>,
    options: &[(&str, String)],
) -> Result<()> {
    run.log_command(CommandRecord {
        command: command.to_string(),
        at: now(),
        outputs,
        options: options
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    })
}

fn cmd_extract(s: &mut Session, a: &RunArg) -> Result<()> {
    let run = RunDir::open(&a.run)?;
    let (sets, _) = load_sets(&run)?;
    let templates = s.templates.clone();
    match score::extract_if_needed(s.backend()?, &templates, &sets)? {
        Some(out) => {
            let name = write_extracted(&run, &out)?;
            println!("wrote {}", run.file(&name).display());
            record(&run, "extract-criteria", vec![name], &[])
        }
        None => {
            println!("every opinion already has criteria");
            Ok(())
        }
    }
}

/// Extracts criteria when any opinion lacks them, writing a criteria file.
fn sets_with_criteria(
    s: &mut Session,
    run: &RunDir,
    outputs: &mut Vec<String>,
) -> Result<Vec<OpinionSet>> {
    let (sets, _) = load_sets(run)?;
    let templates = s.templates.clone();
    match score::extract_if_needed(s.backend()?, &templates, &sets)? {
        Some(out) => {
            outputs.push(write_extracted(run, &out)?);
            Ok(out)
        }
        None => Ok(sets),
    }
}

fn cluster_options(method: ClusterMethod, tau: f64) -> Result<Vec<(&'static str, String)>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(UsageError(format!("--tau must be in (0, 1), got {tau}")).into());
    }
    let mut opts = vec![("cluster_method", method.as_str().to_string())];
    if method == ClusterMethod::EmbeddingGreedy {
        opts.push(("tau", tau.to_string()));
    }
    Ok(opts)
}

fn cmd_cluster(s: &mut Session, a: &ClusterArgs) -> Result<()> {
    let options = cluster_options(a.cluster_method, a.tau)?;
    let run = RunDir::open(&a.run)?;
    let mut outputs = Vec::new();
    let sets = sets_with_criteria(s, &run, &mut outputs)?;
    let templates = s.templates.clone();
    let clusters = score::cluster_sets(s.backend()?, &templates, &sets, a.cluster_method, a.tau)?;
    let name = run.next_version("clusters", "jsonl");
    run.write_jsonl(&name, &clusters)?;
    println!("wrote {}", run.file(&name).display());
    outputs.push(name);
    record(&run, "cluster", outputs, &options)
}

/// Newest clusters file produced with the same method, tau and statements.
fn reusable_clusters(
    run: &RunDir,
    sets: &[OpinionSet],
    method: ClusterMethod,
    tau: f64,
) -> Result<Option<Vec<StatementClustering>>> {
    let Some(name) = run.latest("clusters", "jsonl") else {
        return Ok(None);
    };
    let clusters: Vec<StatementClustering> = run.read_jsonl(&name)?;
    let same_ids = clusters.len() == sets.len()
        && clusters
            .iter()
            .zip(sets)
            .all(|(c, s)| c.statement_id == s.statement_id);
    let same_method = clusters.iter().all(|c| {
        c.clustering.method == method
            && (method != ClusterMethod::EmbeddingGreedy || c.clustering.tau == Some(tau))
    });
    Ok((same_ids && same_method).then_some(clusters))
}

fn cmd_score(s: &mut Session, a: &ScoreArgs) -> Result<()> {
    let metrics = MetricSet::from_names(&a.metrics).map_err(UsageError)?;
    let mut options = cluster_options(a.cluster_method, a.tau)?;
    if let Some(n) = a.ngrams.iter().find(|n| !(1..=3).contains(*n)) {
        return Err(UsageError(format!("--ngram must be 1, 2 or 3, got {n}")).into());
    }
    let run = RunDir::open(&a.run)?;
    let manifest = run.manifest()?;
    require_kind(&manifest, &["gen", "recall"])?;
    let mut outputs = Vec::new();
    let sets = if metrics.perspective {
        sets_with_criteria(s, &run, &mut outputs)?
    } else {
        load_sets(&run)?.0
    };
    let clusters = if metrics.perspective {
        match reusable_clusters(&run, &sets, a.cluster_method, a.tau)? {
            Some(c) => Some(c),
            None => {
                let templates = s.templates.clone();
                let c =
                    score::cluster_sets(s.backend()?, &templates, &sets, a.cluster_method, a.tau)?;
                let name = run.next_version("clusters", "jsonl");
                run.write_jsonl(&name, &c)?;
                outputs.push(name);
                Some(c)
            }
        }
    } else {
        None
    };
    let traces: Option<Vec<RecallTrace>> = if manifest.kind == "recall" {
        Some(run.read_jsonl("traces.jsonl")?)
    } else {
        None
    };
    let opts = ScoreOptions {
        metrics,
        cluster_method: a.cluster_method,
        tau: a.tau,
        counting_mode: a.counting_mode,
        ngrams: a.ngrams.clone(),
        per_stance: a.per_stance,
    };
    let inputs = ScoreInputs {
        manifest: &manifest,
        sets: &sets,
        traces: traces.as_deref(),
        clusters: clusters.as_deref(),
    };
    let scored = score::build_report(s.backend()?, &inputs, &opts)?;
    let v = run.next_shared_version(&[("report", "json"), ("report", "md"), ("embeddings", "csv")]);
    let (json, md, csv) = (
        versioned("report", "json", v),
        versioned("report", "md", v),
        versioned("embeddings", "csv", v),
    );
    run.write_json(&json, &scored.report)?;
    run.write_text(&md, &scored.report.to_markdown())?;
    outputs.push(json.clone());
    outputs.push(md);
    if metrics.semantic {
        run.write_text(&csv, &embeddings_csv(&scored.embeddings)?)?;
        outputs.push(csv);
    }
    print!("{}", score::summary(&scored.report));
    println!("wrote {}", run.file(&json).display());
    options.push(("metrics", format!("{:?}", a.metrics)));
    options.push(("counting_mode", a.counting_mode.as_str().to_string()));
    record(&run, "score", outputs, &options)
}

/// Loads a report from a run directory (newest version) or a JSON file.
pub fn load_report(path: &Path) -> Result<DiversityReport> {
    let file: PathBuf = if path.is_dir() {
        let run = RunDir::open(path)?;
        let name = run
            .latest("report", "json")
            .ok_or_else(|| UsageError(format!("{} has not been scored yet", path.display())))?;
        run.file(&name)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file)
        .map_err(|e| UsageError(format!("{}: {e}", file.display())))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))
}

/// Comparison table, plus a paired permutation test on per-statement
/// semantic scores when exactly two runs are given.
pub fn comparison(reports: &[DiversityReport]) -> Result<String> {
    if let Some(r) = reports
        .iter()
        .find(|r| r.corpus_fingerprint != reports[0].corpus_fingerprint)
    {
        return Err(UsageError(format!(
            "runs {} and {} were made over different corpora",
            reports[0].run_id, r.run_id
        ))
        .into());
    }
    let mut out = String::from("# Run comparison\n\n");
    out.push_str(&format!(
        "Runs: {}\n\n",
        reports
            .iter()
            .map(|r| r.run_id.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    out.push_str(&comparison_markdown(reports));
    if let [a, b] = reports {
        if let (Some(sa), Some(sb)) = (&a.semantic, &b.semantic) {
            let shared: Vec<&String> = sa
                .per_statement
                .keys()
                .filter(|k| sb.per_statement.contains_key(*k))
                .collect();
            if !shared.is_empty() {
                let xa: Vec<f64> = shared.iter().map(|k| sa.per_statement[*k]).collect();
                let xb: Vec<f64> = shared.iter().map(|k| sb.per_statement[*k]).collect();
                let t = paired_permutation_test(&xa, &xb, 10_000, 0)?;
                out.push_str(&format!(
                    "\nPaired permutation test on semantic diversity ({} > {}, {} statements): mean difference {:.4}, p = {:.4}{}\n",
                    a.label(),
                    b.label(),
                    shared.len(),
                    t.mean_difference,
                    t.p_value,
                    if t.exact { " (exact)" } else { "" }
                ));
            }
        }
    }
    Ok(out)
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let reports = a
        .runs
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<_>>>()?;
    let table = comparison(&reports)?;
    print!("{table}");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("comparison.md"), &table)?;
        let curves = curves_csv(&reports);
        std::fs::write(dir.join("curves.csv"), curves)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_cache_stats(settings: &Settings) -> Result<()> {
    let cache = ResponseCache::open_read_only(&settings.cache)?;
    let stats = cache.stats();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "path": settings.cache.display().to_string(),
            "chat_entries": stats.chat_entries,
            "embed_entries": stats.embed_entries,
            "file_bytes": stats.file_bytes,
        }))?
    );
    Ok(())
}
