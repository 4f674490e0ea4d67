//! Layered run settings: command-line flags over a JSON config file over
//! `DIVEX_*` environment variables over built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use divex_core::provider::ProviderConfig;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::UsageError;

/// Flag values as parsed; `None` means "not given on the command line".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub base_url: Option<String>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<u32>,
    pub timeout_ms: Option<u64>,
    pub max_retries: Option<u32>,
    pub embedding_model: Option<String>,
    pub embedding_base_url: Option<String>,
    pub concurrency: Option<usize>,
    pub runs_dir: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub provider: ProviderConfig,
    pub embedding: ProviderConfig,
    pub concurrency: usize,
    pub runs_dir: PathBuf,
    pub cache: PathBuf,
    pub seed: u64,
    /// Setting name → "cli" | "file" | "env" | "default".
    pub sources: BTreeMap<String, String>,
}

const ENV_PREFIX: &str = "DIVEX_";

struct Layers<'a> {
    file: Map<String, Value>,
    env: &'a dyn Fn(&str) -> Option<String>,
    sources: BTreeMap<String, String>,
}

impl Layers<'_> {
    fn pick<T>(&mut self, key: &str, cli: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + serde::de::DeserializeOwned,
        T::Err: std::fmt::Display,
    {
        let (value, source) = if let Some(v) = cli {
            (v, "cli")
        } else if let Some(v) = self.file.get(key) {
            let v = serde_json::from_value(v.clone())
                .map_err(|e| UsageError(format!("config file: {key}: {e}")))?;
            (v, "file")
        } else if let Some(raw) = (self.env)(&format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())) {
            let v = raw.parse().map_err(|e| {
                UsageError(format!("{ENV_PREFIX}{}: {e}", key.to_ascii_uppercase()))
            })?;
            (v, "env")
        } else {
            (default, "default")
        };
        self.sources.insert(key.to_string(), source.to_string());
        Ok(value)
    }
}

fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("config file {}: {e}", path.display())))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(UsageError(format!(
            "config file {} must hold a JSON object",
            path.display()
        ))
        .into()),
        Err(e) => Err(UsageError(format!("{e:#}")).into()),
    }
}

const KNOWN_KEYS: &[&str] = &[
    "model",
    "base_url",
    "temperature",
    "top_p",
    "max_tokens",
    "timeout_ms",
    "max_retries",
    "embedding_model",
    "embedding_base_url",
    "concurrency",
    "runs_dir",
    "cache",
    "seed",
];

impl Settings {
    pub fn resolve(cli: &Overrides, config_file: Option<&Path>) -> Result<Self> {
        Self::resolve_with(cli, config_file, &|k| std::env::var(k).ok())
    }

    /// As [`Settings::resolve`] with an explicit environment lookup.
    pub fn resolve_with(
        cli: &Overrides,
        config_file: Option<&Path>,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self> {
        let file = match config_file {
            Some(p) => read_config_file(p)?,
            None => Map::new(),
        };
        if let Some(unknown) = file.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(UsageError(format!("config file: unknown key {unknown:?}")).into());
        }
        let mut l = Layers {
            file,
            env,
            sources: BTreeMap::new(),
        };
        let d = ProviderConfig::default();
        let e = ProviderConfig::embedding_default();
        let provider = ProviderConfig {
            model_id: l.pick("model", cli.model.clone(), d.model_id.clone())?,
            base_url: l.pick("base_url", cli.base_url.clone(), d.base_url.clone())?,
            temperature: l.pick("temperature", cli.temperature, d.temperature)?,
            top_p: l.pick("top_p", cli.top_p, d.top_p)?,
            max_tokens: l.pick("max_tokens", cli.max_tokens, d.max_tokens)?,
            timeout_ms: l.pick("timeout_ms", cli.timeout_ms, d.timeout_ms)?,
            max_retries: l.pick("max_retries", cli.max_retries, d.max_retries)?,
            retry_base_ms: d.retry_base_ms,
        };
        let embedding = ProviderConfig {
            model_id: l.pick(
                "embedding_model",
                cli.embedding_model.clone(),
                e.model_id.clone(),
            )?,
            base_url: l.pick(
                "embedding_base_url",
                cli.embedding_base_url.clone(),
                provider.base_url.clone(),
            )?,
            timeout_ms: provider.timeout_ms,
            max_retries: provider.max_retries,
            ..e
        };
        let concurrency: usize = l.pick("concurrency", cli.concurrency, 4)?;
        if concurrency == 0 {
            return Err(UsageError("concurrency must be at least 1".into()).into());
        }
        let runs_dir: PathBuf = l.pick("runs_dir", cli.runs_dir.clone(), PathBuf::from("runs"))?;
        let cache = l.pick("cache", cli.cache.clone(), runs_dir.join("cache.jsonl"))?;
        let seed = l.pick("seed", cli.seed, 0)?;
        provider.validate().map_err(|e| UsageError(e.to_string()))?;
        embedding
            .validate()
            .map_err(|e| UsageError(e.to_string()))?;
        Ok(Settings {
            provider,
            embedding,
            concurrency,
            runs_dir,
            cache,
            seed,
            sources: l.sources,
        })
    }
}
