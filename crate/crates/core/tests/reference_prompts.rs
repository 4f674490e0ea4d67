use std::path::PathBuf;

use divex_core::clustering::{llm_cluster, ClusterMethod};
use divex_core::corpus::{Corpus, Statement, TaskType};
use divex_core::orchestrator::{run_generation, run_recall, RunConfig};
use divex_core::parser::{
    parse_cluster_output, parse_completion, parse_criteria_list, Opinion, Stance,
};
use divex_core::prompting::{
    build_clustering_prompt, build_criteria_extraction_prompt, build_opinion_prompt,
    build_recall_prompt, build_seed_prompt, default_shot_bank, PromptMode, PromptSpec, ShotExample,
    TemplateSet,
};
use divex_core::provider::{load_fixture, record_fixture, FixtureProvider, ProviderConfig, Record};

fn testdata(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("testdata/reference")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn statement(text: &str, task: TaskType) -> Statement {
    Statement {
        id: "t:1".into(),
        text: text.into(),
        dataset_tag: "reference".into(),
        task_type: task,
    }
}

fn privacy_shot() -> ShotExample {
    let mut shot = default_shot_bank()[1].clone();
    shot.statement = "It's okay to have privacy".into();
    shot
}

fn fixture_provider(pairs: &[(String, String)]) -> (FixtureProvider, tempfile::TempDir) {
    let config = ProviderConfig::default();
    let records: Vec<Record> = pairs
        .iter()
        .map(|(p, c)| Record::chat(&config, p, c))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reference.jsonl");
    record_fixture(&path, &records).unwrap();
    (
        FixtureProvider::new(load_fixture(&path).unwrap(), config),
        dir,
    )
}

#[test]
fn one_shot_criteria_prompt_matches_reference_input() {
    let spec = PromptSpec::new(PromptMode::CriteriaBased, 1, TaskType::Stance);
    let target = statement("You're expected to do what you are told", TaskType::Stance);
    let prompt =
        build_opinion_prompt(&TemplateSet::builtin(), &spec, &target, &[privacy_shot()]).unwrap();
    assert_eq!(prompt, testdata("one_shot_input.txt"));
}

#[test]
fn reference_output_parses_to_ten_opinions() {
    let out = parse_completion(&testdata("one_shot_output.txt"), TaskType::Stance).unwrap();
    assert_eq!(out.opinions.len(), 10);
    let first = &out.opinions[0];
    assert_eq!(first.index, 1);
    assert_eq!(first.stance, Stance::Agree);
    assert_eq!(first.criteria, vec!["teamwork", "goals"]);
    assert_eq!(
        first.reason,
        "In a team setting, following instructions or orders can be necessary for achieving shared goals."
    );
    assert_eq!(out.opinions[1].criteria, vec!["creativity", "innovation"]);
    let agree = out
        .opinions
        .iter()
        .filter(|o| o.stance == Stance::Agree)
        .count();
    assert_eq!(agree, 5);
}

#[test]
fn generation_replaying_reference_yields_ten_opinions() {
    let spec = PromptSpec::new(PromptMode::CriteriaBased, 1, TaskType::Stance);
    let target = statement("You're expected to do what you are told", TaskType::Stance);
    let prompt =
        build_opinion_prompt(&TemplateSet::builtin(), &spec, &target, &[privacy_shot()]).unwrap();
    let (chat, _dir) = fixture_provider(&[(prompt, testdata("one_shot_output.txt"))]);
    let corpus = Corpus {
        statements: vec![target],
        source_path: "reference".into(),
        warnings: vec![],
    };
    let config = RunConfig::new("one-shot", spec, ProviderConfig::default());
    let out = run_generation(
        &config,
        &chat,
        &TemplateSet::builtin(),
        &[privacy_shot()],
        &corpus,
    )
    .unwrap();
    assert!(out.failures.is_empty());
    assert_eq!(out.sets[0].opinions.len(), 10);
}

fn privacy_seed() -> Opinion {
    Opinion::new(
        1,
        Stance::Agree,
        &["personal boundaries", "autonomy"],
        "Having privacy allows individuals to establish personal boundaries and maintain their autonomy.",
    )
}

#[test]
fn recall_prompt_matches_reference_input() {
    let s = statement("It's okay to have privacy", TaskType::Stance);
    let prompt = build_recall_prompt(
        &TemplateSet::builtin(),
        &s,
        &[privacy_seed()],
        2,
        TaskType::Stance,
    )
    .unwrap();
    assert_eq!(prompt, testdata("recall_input.txt"));
}

#[test]
fn recall_replaying_reference_output() {
    let templates = TemplateSet::builtin();
    let s = statement("It's okay to have privacy", TaskType::Stance);
    let seed_prompt = build_seed_prompt(&templates, &s, TaskType::Stance).unwrap();
    let seed_completion = format!(
        "{{1: {{\"Stance\": \"Agree\", \"Criteria\": [\"personal boundaries\", \"autonomy\"], \"Reason\": \"{}\"}}}}",
        privacy_seed().reason
    );
    let (chat, _dir) = fixture_provider(&[
        (seed_prompt, seed_completion),
        (
            testdata("recall_input.txt"),
            testdata("recall_output.txt"),
        ),
    ]);
    let mut config = RunConfig::new(
        "recall",
        PromptSpec::new(PromptMode::CriteriaBased, 0, TaskType::Stance),
        ProviderConfig::default(),
    );
    config.recall_schedule = vec![2];
    let trace = run_recall(&config, &chat, &templates, &s).unwrap();
    assert_eq!(trace.steps.len(), 1);
    assert_eq!(trace.steps[0].n_target, 2);
    assert_eq!(trace.steps[0].opinions.len(), 2);
    let second = &trace.final_opinions[1];
    assert_eq!(second.stance, Stance::Disagree);
    assert_eq!(second.criteria, vec!["transparency", "trust"]);
    assert_eq!(
        second.reason,
        "Lack of privacy can promote transparency and build trust in relationships."
    );
}

#[test]
fn seed_prompts_use_task_labels() {
    let t = TemplateSet::builtin();
    let hate =
        build_seed_prompt(&t, &statement("x", TaskType::Labeling), TaskType::Labeling).unwrap();
    assert!(hate.contains("\"Hate Speech\" or \"Not Hate Speech\""));
    let stance =
        build_seed_prompt(&t, &statement("x", TaskType::Stance), TaskType::Stance).unwrap();
    assert!(stance.contains("\"Agree\" or \"Disagree\""));
    assert!(stance.contains("from 1 different person"));
    let story = build_seed_prompt(
        &t,
        &statement("x", TaskType::Generation),
        TaskType::Generation,
    )
    .unwrap();
    assert!(story.contains("Continue the story with one sentence"));
}

#[test]
fn generation_recall_prompt_wording() {
    let mut seed = Opinion::new(1, Stance::None, &["honesty"], "It is right.");
    seed.continuation = Some("She gave it back.".into());
    let s = statement("Jane found a wallet.", TaskType::Generation);
    let p = build_recall_prompt(
        &TemplateSet::builtin(),
        &s,
        &[seed],
        5,
        TaskType::Generation,
    )
    .unwrap();
    assert!(p.contains("Continue the story with one sentence as written by different people"));
    assert!(p.ends_with(", 2: {\"Story\":"));
}

#[test]
fn extraction_prompt_and_answer() {
    let p = build_criteria_extraction_prompt(
        &TemplateSet::builtin(),
        "Reduced privacy promotes openness and honesty, as individuals are more transparent about their actions and intentions.",
    )
    .unwrap();
    assert!(p.contains("Criteria: [\"openness\", \"honesty\"]"));
    assert!(p.ends_with("Criteria:"));
    assert_eq!(
        parse_criteria_list("Criteria: [“openness”, “honesty”]").unwrap(),
        vec!["openness", "honesty"]
    );
}

/// The three clustering demonstrations: input words and the printed answer.
fn clustering_shots() -> Vec<(&'static str, &'static str)> {
    vec![
        (
            "protection, compatibility, padding, quality, safety, fit",
            "[“protection”, “safety”, “padding”], [“compatibility”, “fit”], [“quality”]]",
        ),
        (
            "mental health, , humanity, well-being, safety, dignity, non-violence, mutual respect, peace, unity, security,  acceptance, human rights",
            "[[“mental health”, “well-being”], [“respect”, “dignity”, “mutual respect”], [“peace”, “unity”, “non-violence”], [“security”, “safety”, “acceptance”], [“human rights”, “humanity”]]",
        ),
        (
            "freedom, comfort, independent, self-sustainability, ease, convenience",
            "[[“freedom”, “independent”, “self-sustainability”], [“comfort”, “ease”, “convenience”]]",
        ),
    ]
}

#[test]
fn clustering_shot_answers_parse() {
    let shots = clustering_shots();
    assert_eq!(
        parse_cluster_output(shots[0].1).unwrap(),
        vec![
            vec!["protection", "safety", "padding"],
            vec!["compatibility", "fit"],
            vec!["quality"]
        ]
    );
    assert_eq!(
        parse_cluster_output("[[\"joy\",\"happiness\"]]").unwrap(),
        vec![vec!["joy", "happiness"]]
    );
    let prompt =
        build_clustering_prompt(&TemplateSet::builtin(), &["protection", "safety"]).unwrap();
    assert!(prompt.contains(
        "[[\"protection\", \"safety\", \"padding\"], [\"compatibility\", \"fit\"], [\"quality\"]]"
    ));
    assert!(prompt.ends_with("Input: protection, safety\nAnswer:"));
}

#[test]
fn clustering_shots_replay_to_expected_groupings() {
    let templates = TemplateSet::builtin();
    let words: Vec<Vec<String>> = clustering_shots()
        .iter()
        .map(|(input, _)| input.split(',').map(|w| w.trim().to_string()).collect())
        .collect();
    let pairs: Vec<(String, String)> = clustering_shots()
        .iter()
        .zip(&words)
        .map(|((_, answer), w)| {
            (
                build_clustering_prompt(&templates, w).unwrap(),
                answer.to_string(),
            )
        })
        .collect();
    let (chat, _dir) = fixture_provider(&pairs);

    let c1 = llm_cluster(&chat, &templates, &words[0]).unwrap();
    assert_eq!(c1.method, ClusterMethod::LlmPrompted);
    assert_eq!(
        c1.groups,
        vec![
            vec!["protection", "safety", "padding"],
            vec!["compatibility", "fit"],
            vec!["quality"]
        ]
    );
    assert!(c1.ungrouped.is_empty());

    // "respect" is not among the inputs, so it is dropped from its group
    let c2 = llm_cluster(&chat, &templates, &words[1]).unwrap();
    assert_eq!(
        c2.groups,
        vec![
            vec!["mental health", "well-being"],
            vec!["dignity", "mutual respect"],
            vec!["peace", "unity", "non-violence"],
            vec!["security", "safety", "acceptance"],
            vec!["human rights", "humanity"],
        ]
    );
    assert!(c2.ungrouped.is_empty());
    assert_eq!(c2.phrase_count(), 12);
    assert!(c2.warnings.iter().any(|w| w.contains("respect")));

    let c3 = llm_cluster(&chat, &templates, &words[2]).unwrap();
    assert_eq!(
        c3.groups,
        vec![
            vec!["freedom", "independent", "self-sustainability"],
            vec!["comfort", "ease", "convenience"]
        ]
    );
}

#[test]
fn one_omitted_word_of_250_is_ungrouped() {
    let templates = TemplateSet::builtin();
    let words: Vec<String> = (0..250).map(|i| format!("criterion {i}")).collect();
    let groups: Vec<String> = words[..249]
        .chunks(5)
        .map(|g| {
            format!(
                "[{}]",
                g.iter()
                    .map(|w| format!("\"{w}\""))
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        })
        .collect();
    let answer = format!("[{}]", groups.join(", "));
    let (chat, _dir) =
        fixture_provider(&[(build_clustering_prompt(&templates, &words).unwrap(), answer)]);
    let c = llm_cluster(&chat, &templates, &words).unwrap();
    assert_eq!(c.ungrouped, vec!["criterion 249"]);
    assert_eq!(c.phrase_count(), 250);
}
