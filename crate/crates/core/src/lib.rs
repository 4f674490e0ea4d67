//! Diversity-aware opinion prompting for language models.
//!
//! The crate builds criteria-based and free-form opinion prompts, drives the
//! step-by-step recall loop against a chat provider, parses the
//! Python-dict-style completions tolerantly, clusters criteria phrases and
//! scores semantic, perspective and lexical diversity.
//!
//! ```no_run
//! use divex_core::corpus::{load_corpus, TaskType};
//! use divex_core::orchestrator::{run_generation, RunConfig};
//! use divex_core::prompting::{default_shot_bank, PromptMode, PromptSpec, TemplateSet};
//! use divex_core::provider::{load_fixture, FixtureProvider, ProviderConfig};
//!
//! let corpus = load_corpus("statements.jsonl", TaskType::Stance, "text").unwrap();
//! let config = RunConfig::new(
//!     "demo",
//!     PromptSpec::new(PromptMode::CriteriaBased, 1, TaskType::Stance),
//!     ProviderConfig::default(),
//! );
//! let chat = FixtureProvider::new(load_fixture("fixtures/").unwrap(), config.provider.clone());
//! let out = run_generation(&config, &chat, &TemplateSet::builtin(), &default_shot_bank(), &corpus)
//!     .unwrap();
//! println!("{} statements", out.sets.len());
//! ```

pub mod clustering;
pub mod corpus;
pub mod metrics;
pub mod orchestrator;
pub mod parser;
pub mod prompting;
pub mod provider;
pub mod text;

pub use clustering::{ClusterCount, ClusterMethod, CountingMode, CriteriaClustering};
pub use corpus::{Corpus, Statement, TaskType};
pub use metrics::{DiversityReport, EmbeddingVector};
pub use orchestrator::{OpinionSet, RecallTrace, RunConfig};
pub use parser::{Opinion, ParseOutcome, Stance};
pub use prompting::{PromptMode, PromptSpec, ShotExample};
pub use provider::{ChatExchange, ChatProvider, EmbeddingProvider, ProviderConfig};
