//! Regenerates the shipped fixtures under `fixtures/`.
//!
//! A deterministic synthetic model answers every prompt. Its exchanges are
//! recorded while the real CLI commands run, then the commands are replayed
//! from the recordings alone to produce the expected reports.
//!
//!     cargo run -p divex-cli --example make_fixtures -- fixtures

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{ensure, Context, Result};
use clap::Parser;
use divex_cli::settings::{Overrides, Settings};
use divex_cli::{execute, Backend, Cli};
use divex_core::metrics::lexical_diversity;
use divex_core::parser::render_opinions;
use divex_core::provider::{FixtureStore, ProviderError, RecordingProvider, ScriptedProvider};
use divex_core::{Opinion, Stance};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 8;

const CONCEPTS: &[&[&str]] = &[
    &["safety", "security", "protection"],
    &["freedom", "autonomy", "independence"],
    &["fairness", "equality", "justice"],
    &["health", "well-being"],
    &["honesty", "trust", "transparency"],
    &["family", "relationships"],
    &["respect", "dignity"],
    &["cost", "affordability"],
    &["community", "belonging"],
    &["responsibility", "accountability"],
    &["privacy", "confidentiality"],
    &["tradition", "culture"],
    &["efficiency", "convenience"],
    &["kindness", "empathy", "compassion"],
    &["education", "learning"],
    &["environment", "sustainability"],
    &["confidence", "self-esteem"],
];

/// Phrases the synthetic model leaves out of every clustering answer.
const ORPHANS: &[&str] = &["nuance", "context"];

const DEMO: &[&str] = &[
    "It's good to make children do household chores.",
    "You should tell your friends when they hurt your feelings.",
    "It's okay to skip a family dinner to work late.",
    "People should be allowed to keep exotic animals as pets.",
    "It's wrong to read your partner's messages without asking.",
    "Tipping should be replaced by higher wages.",
    "It's fine to lie to protect someone's feelings.",
    "Cities should ban cars from downtown areas.",
    "Parents should limit teenagers' screen time.",
    "It's rude to wear headphones at a family gathering.",
    "Public schools should require uniforms.",
    "You should always return a lost wallet with the cash inside.",
    "It's okay to eat meat.",
    "Employers should be able to monitor employees' social media.",
    "It's acceptable to cut ties with toxic relatives.",
    "Everyone should learn to cook basic meals.",
    "It's wrong to regift a present.",
    "Neighbors should keep their lawns tidy.",
    "People should volunteer in their communities.",
    "It's fine to cancel plans at the last minute.",
];

/// Agree reasons for the first statement: 64 tokens, one repeated.
const UNIQUE_REASONS: &[(&str, &str)] = &[
    ("responsibility", "Sharing chores teaches children discipline early, building habits that last into adulthood."),
    ("confidence", "Kids who help around home gain confidence from contributing real value to their household."),
    ("accountability", "Responsibility grows when young people see how cleaning, cooking, and laundry affect everyone."),
    ("family", "Parents benefit too: lighter workloads leave evenings free for games, stories, or rest."),
    ("independence", "Practical skills like budgeting groceries prepare teenagers for independent living later on."),
];

const LEAD_AGREE: &[&str] = &[
    "This supports",
    "It protects",
    "It strengthens",
    "Doing so respects",
    "It encourages",
];
const LEAD_DISAGREE: &[&str] = &[
    "This undermines",
    "It threatens",
    "It ignores",
    "Doing so erodes",
    "It neglects",
];
const LEAD_HATE: &[&str] = &["The wording attacks", "The post mocks", "This demeans"];
const LEAD_NOT_HATE: &[&str] = &[
    "The post only questions",
    "The wording merely discusses",
    "This simply mentions",
];
const MID: &[&str] = &[
    "while also shaping",
    "and it affects",
    "which matters for",
    "without sacrificing",
    "because people value",
];
const TAIL: &[&str] = &[
    " in everyday life.",
    " for everyone involved.",
    " over the long run.",
    " at home and at work.",
    ".",
];

const SUBJECTS: &[&str] = &[
    "My neighbor",
    "The new manager",
    "Our coach",
    "That blogger",
    "The city council",
    "A stranger online",
    "The landlord",
    "My cousin",
];
const VERBS: &[&str] = &[
    "keeps complaining about",
    "posted a rant about",
    "wrote a joke about",
    "shared an article on",
    "argued loudly about",
];
const OBJECTS: &[&str] = &[
    "immigrants",
    "the local festival",
    "older drivers",
    "vegans",
    "remote workers",
    "the parking rules",
    "tourists",
    "the school board",
];

fn concept_of(phrase: &str) -> Option<usize> {
    CONCEPTS.iter().position(|c| c.contains(&phrase))
}

fn text_seed(text: &str) -> u64 {
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    h.finish()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn directions() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..CONCEPTS.len())
        .map(|_| unit((0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

/// Text of the statement a generation prompt asks about.
fn target_statement(prompt: &str) -> Option<&str> {
    let start = prompt.rfind("Statement: ")? + "Statement: ".len();
    prompt[start..].lines().next()
}

fn between<'a>(s: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = s.rfind(open)? + open.len();
    let end = s[start..].find(close)? + start;
    Some(&s[start..end])
}

/// Opinions and the concept behind each reason.
struct Synth {
    texts: HashMap<String, usize>,
    reason_concepts: Mutex<HashMap<String, usize>>,
}

impl Synth {
    fn register(&self, reason: &str, concept: usize) {
        self.reason_concepts
            .lock()
            .unwrap()
            .insert(reason.to_string(), concept);
    }

    fn opinions(&self, statement: usize, criteria_mode: bool, labeling: bool) -> Vec<Opinion> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            1000 + statement as u64 + if criteria_mode { 0 } else { 500 },
        );
        let (pos, neg) = if labeling {
            (Stance::Hate, Stance::NotHate)
        } else {
            (Stance::Agree, Stance::Disagree)
        };
        let stances: Vec<Stance> = if labeling {
            // three of every eight statements are imbalanced
            let n_pos = match statement % 8 {
                0 | 5 => 6,
                3 => 4,
                _ => 5,
            };
            let mut v: Vec<Stance> = (0..10).map(|i| if i < n_pos { pos } else { neg }).collect();
            v.shuffle(&mut rng);
            v
        } else {
            let n = if statement == 6 || statement == 14 {
                9
            } else {
                10
            };
            let extra_pos = statement % 4 == 2;
            (0..n)
                .map(|i| {
                    if i % 2 == 0 || (extra_pos && i == 3) {
                        pos
                    } else {
                        neg
                    }
                })
                .collect()
        };
        let mut relevant: Vec<usize> = (0..CONCEPTS.len()).collect();
        relevant.shuffle(&mut rng);
        relevant.truncate(if criteria_mode { 6 } else { 3 });
        let mut unique = UNIQUE_REASONS.iter();
        stances
            .iter()
            .enumerate()
            .map(|(i, &stance)| {
                let index = i as u32 + 1;
                if statement == 0 && criteria_mode && !labeling && stance == pos {
                    let (phrase, reason) = unique.next().expect("five agree opinions");
                    self.register(reason, concept_of(phrase).unwrap());
                    return Opinion::new(index, stance, &[phrase], reason);
                }
                let c1 = *relevant.choose(&mut rng).unwrap();
                let c2 = *relevant
                    .iter()
                    .filter(|&&c| c != c1)
                    .collect::<Vec<_>>()
                    .choose(&mut rng)
                    .unwrap();
                let p1 = *CONCEPTS[c1].choose(&mut rng).unwrap();
                let mut p2 = *CONCEPTS[*c2].choose(&mut rng).unwrap();
                if rng.random_bool(0.08) {
                    p2 = ORPHANS.choose(&mut rng).unwrap();
                }
                let lead = match (labeling, stance == pos) {
                    (false, true) => LEAD_AGREE,
                    (false, false) => LEAD_DISAGREE,
                    (true, true) => LEAD_HATE,
                    (true, false) => LEAD_NOT_HATE,
                };
                let reason = format!(
                    "{} {p1} {} {p2}{}",
                    lead.choose(&mut rng).unwrap(),
                    MID.choose(&mut rng).unwrap(),
                    TAIL.choose(&mut rng).unwrap()
                );
                self.register(&reason, c1);
                Opinion::new(index, stance, &[p1, p2], &reason)
            })
            .collect()
    }

    fn chat(&self, prompt: &str) -> Result<String, ProviderError> {
        if prompt.starts_with("Group all the words") {
            let input =
                between(prompt, "Input: ", "\n").ok_or_else(|| ProviderError::other("no input"))?;
            let mut groups: Vec<(usize, Vec<&str>)> = Vec::new();
            for phrase in input.split(", ") {
                let Some(c) = concept_of(phrase) else {
                    continue;
                };
                match groups.iter_mut().find(|(k, _)| *k == c) {
                    Some((_, g)) => g.push(phrase),
                    None => groups.push((c, vec![phrase])),
                }
            }
            let body: Vec<String> = groups
                .iter()
                .map(|(_, g)| {
                    format!(
                        "[{}]",
                        g.iter()
                            .map(|p| format!("\"{p}\""))
                            .collect::<Vec<_>>()
                            .join(", ")
                    )
                })
                .collect();
            return Ok(format!("[{}]", body.join(", ")));
        }
        if prompt.starts_with("You are given an opinion.") {
            let opinion = between(prompt, "Opinion: \"", "\"\nCriteria:").unwrap_or_default();
            let mut found: Vec<(usize, &str)> = CONCEPTS
                .iter()
                .flat_map(|c| c.iter())
                .chain(ORPHANS)
                .filter_map(|p| {
                    let at = opinion.find(&format!(" {p}"))?;
                    let next = opinion[at + p.len() + 1..].chars().next();
                    (!next.is_some_and(|c| c.is_alphanumeric() || c == '-')).then_some((at, *p))
                })
                .collect();
            found.sort();
            let list: Vec<String> = found.iter().map(|(_, p)| format!("\"{p}\"")).collect();
            return Ok(format!("[{}]", list.join(", ")));
        }
        let text =
            target_statement(prompt).ok_or_else(|| ProviderError::other("unrecognized prompt"))?;
        let &statement = self
            .texts
            .get(text)
            .ok_or_else(|| ProviderError::other(format!("unknown statement {text:?}")))?;
        let criteria_mode = prompt.contains("one-phrase criteria");
        let labeling = prompt.contains("Hate Speech");
        let ops = self.opinions(statement, criteria_mode, labeling);
        Ok(format!("Output:\n{}", render_opinions(&ops, criteria_mode)))
    }

    fn embed(&self, text: &str, dirs: &[Vec<f64>]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(text_seed(text));
        let concept =
            concept_of(text).or_else(|| self.reason_concepts.lock().unwrap().get(text).copied());
        let noise: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        match concept {
            Some(c) => dirs[c]
                .iter()
                .zip(&noise)
                .map(|(d, n)| d + 0.45 * n)
                .collect(),
            None => noise,
        }
    }
}

fn labeling_texts() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    while out.len() < 200 {
        let t = format!(
            "{} {} {} (post {}).",
            SUBJECTS.choose(&mut rng).unwrap(),
            VERBS.choose(&mut rng).unwrap(),
            OBJECTS.choose(&mut rng).unwrap(),
            out.len() + 1
        );
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    out
}

fn write_corpus(path: &Path, prefix: &str, texts: &[String]) -> Result<()> {
    let mut body = String::new();
    for (i, t) in texts.iter().enumerate() {
        body.push_str(&serde_json::to_string(
            &serde_json::json!({"id": format!("{prefix}{:03}", i + 1), "text": t}),
        )?);
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// Command lines shared by recording and replay, relative to the fixture dir.
fn scripts(root: &Path) -> Vec<Vec<String>> {
    let demo = root.join("corpora/demo.jsonl");
    let labels = root.join("corpora/imbalance.jsonl");
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let p = |p: &Path| p.display().to_string();
    vec![
        s(&[
            "--run-id",
            "demo-criteria",
            "gen",
            "--corpus",
            &p(&demo),
            "--mode",
            "criteria",
            "--shots",
            "1",
        ]),
        s(&["score", "RUNS/demo-criteria"]),
        s(&[
            "cluster",
            "RUNS/demo-criteria",
            "--cluster-method",
            "greedy",
        ]),
        s(&[
            "--run-id",
            "demo-freeform",
            "gen",
            "--corpus",
            &p(&demo),
            "--mode",
            "freeform",
            "--shots",
            "1",
        ]),
        s(&["score", "RUNS/demo-freeform"]),
        s(&[
            "cluster",
            "RUNS/demo-freeform",
            "--cluster-method",
            "greedy",
        ]),
        s(&[
            "--run-id",
            "imbalance",
            "gen",
            "--corpus",
            &p(&labels),
            "--task",
            "labeling",
            "--shots",
            "0",
        ]),
        s(&["score", "RUNS/imbalance", "--metric", "balance,lexical"]),
    ]
}

fn run_all(root: &Path, runs: &Path, backend: Option<&Backend>) -> Result<()> {
    let config = root.join("divex.json");
    for script in scripts(root) {
        let mut args = vec![
            "divex".to_string(),
            "--config".into(),
            config.display().to_string(),
            "--runs-dir".into(),
            runs.display().to_string(),
            "--concurrency".into(),
            "1".into(),
        ];
        if backend.is_none() {
            args.push("--fixtures".into());
            args.push(root.join("recordings").display().to_string());
        }
        args.extend(
            script
                .iter()
                .map(|a| a.replace("RUNS", &runs.display().to_string())),
        );
        let cli = Cli::try_parse_from(&args)?;
        execute(&cli, backend).with_context(|| args.join(" "))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(root.join("corpora"))?;
    std::fs::create_dir_all(root.join("recordings"))?;
    std::fs::create_dir_all(root.join("expected"))?;
    std::fs::write(
        root.join("divex.json"),
        "{\n  \"model\": \"synthetic-chat\",\n  \"embedding_model\": \"synthetic-embed-8d\",\n  \"seed\": 0\n}\n",
    )?;
    let demo: Vec<String> = DEMO.iter().map(|s| s.to_string()).collect();
    let labels = labeling_texts();
    write_corpus(&root.join("corpora/demo.jsonl"), "s", &demo)?;
    write_corpus(&root.join("corpora/imbalance.jsonl"), "h", &labels)?;

    let unique: Vec<Opinion> = UNIQUE_REASONS
        .iter()
        .map(|(p, r)| Opinion::new(1, Stance::Agree, &[p], r))
        .collect();
    let lex = lexical_diversity(&unique, 1)?;
    ensure!(lex > 0.98, "engineered group scores {lex}");

    let synth = Arc::new(Synth {
        texts: demo
            .iter()
            .chain(&labels)
            .enumerate()
            .map(|(i, t)| (t.clone(), if i < demo.len() { i } else { i - demo.len() }))
            .collect(),
        reason_concepts: Mutex::new(HashMap::new()),
    });
    let dirs = directions();
    let (chat_synth, embed_synth) = (synth.clone(), synth.clone());
    let scripted: &'static ScriptedProvider = Box::leak(Box::new(
        ScriptedProvider::new("synthetic")
            .with_chat(move |p| chat_synth.chat(p))
            .with_embed(move |t| embed_synth.embed(t, &dirs)),
    ));
    let settings = Settings::resolve(&Overrides::default(), Some(&root.join("divex.json")))?;
    let recorder = Arc::new(
        RecordingProvider::new()
            .with_chat(scripted, settings.provider.clone())
            .with_embed(scripted, settings.embedding.clone()),
    );
    let backend = Backend::new(
        "fixtures",
        Box::new(recorder.clone()),
        Box::new(recorder.clone()),
    );

    let live = tempfile::tempdir()?;
    run_all(&root, live.path(), Some(&backend))?;
    let records = FixtureStore::from_records(recorder.records()).records();
    let (demo_recs, label_recs): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| {
        !matches!(r, divex_core::provider::Record::Chat { prompt, .. } if prompt.contains("Hate Speech"))
    });
    divex_core::provider::record_fixture(root.join("recordings/demo.jsonl"), &demo_recs)?;
    divex_core::provider::record_fixture(root.join("recordings/imbalance.jsonl"), &label_recs)?;

    let replay = tempfile::tempdir()?;
    run_all(&root, replay.path(), None)?;
    for run in ["demo-criteria", "demo-freeform", "imbalance"] {
        let recorded = std::fs::read(live.path().join(run).join("report.json"))?;
        let replayed = std::fs::read(replay.path().join(run).join("report.json"))?;
        ensure!(
            recorded == replayed,
            "{run}: replay differs from the recorded run"
        );
        std::fs::write(
            root.join("expected").join(format!("{run}.report.json")),
            replayed,
        )?;
    }
    let reports: Vec<_> = ["demo-criteria", "demo-freeform"]
        .iter()
        .map(|r| divex_cli::load_report(&replay.path().join(r)))
        .collect::<Result<_>>()?;
    std::fs::write(
        root.join("expected/comparison.md"),
        divex_cli::comparison(&reports)?,
    )?;
    println!("fixtures written to {}", root.display());
    Ok(())
}
