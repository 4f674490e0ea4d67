use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{
    check_dims, CacheKey, ChatExchange, ChatProvider, EmbeddingProvider, ProviderConfig,
    ProviderError, TokenUsage,
};
use crate::metrics::EmbeddingVector;

/// One line of a cache or fixture file. The cache key is recomputed from the
/// fields on load, so records can be written by hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Chat {
        model_id: String,
        temperature: f64,
        top_p: f64,
        max_tokens: u32,
        prompt: String,
        completion: String,
        #[serde(default)]
        token_usage: TokenUsage,
        #[serde(default)]
        latency_ms: u64,
    },
    Embed {
        model_id: String,
        text: String,
        embedding: Vec<f64>,
    },
}

impl Record {
    pub fn from_exchange(config: &ProviderConfig, ex: &ChatExchange) -> Self {
        Record::Chat {
            model_id: config.model_id.clone(),
            temperature: config.temperature,
            top_p: config.top_p,
            max_tokens: config.max_tokens,
            prompt: ex.prompt.clone(),
            completion: ex.completion.clone(),
            token_usage: ex.token_usage,
            latency_ms: ex.latency_ms,
        }
    }

    /// Chat record for a prompt/completion pair under `config`.
    pub fn chat(config: &ProviderConfig, prompt: &str, completion: &str) -> Self {
        Record::Chat {
            model_id: config.model_id.clone(),
            temperature: config.temperature,
            top_p: config.top_p,
            max_tokens: config.max_tokens,
            prompt: prompt.to_string(),
            completion: completion.to_string(),
            token_usage: TokenUsage::default(),
            latency_ms: 0,
        }
    }

    pub fn embedding(model_id: &str, text: &str, values: &[f64]) -> Self {
        Record::Embed {
            model_id: model_id.to_string(),
            text: text.to_string(),
            embedding: values.to_vec(),
        }
    }

    pub fn key(&self) -> CacheKey {
        match self {
            Record::Chat {
                model_id,
                temperature,
                top_p,
                max_tokens,
                prompt,
                ..
            } => CacheKey::chat_parts(model_id, *temperature, *top_p, *max_tokens, prompt),
            Record::Embed { model_id, text, .. } => CacheKey::embed(model_id, text),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Record::Chat { .. } => "chat",
            Record::Embed { .. } => "embed",
        }
    }

    fn to_exchange(&self) -> Option<ChatExchange> {
        match self {
            Record::Chat {
                model_id,
                prompt,
                completion,
                token_usage,
                latency_ms,
                ..
            } => Some(ChatExchange {
                prompt: prompt.clone(),
                completion: completion.clone(),
                model_id: model_id.clone(),
                token_usage: *token_usage,
                latency_ms: *latency_ms,
            }),
            Record::Embed { .. } => None,
        }
    }

    fn to_vector(&self) -> Option<EmbeddingVector> {
        match self {
            Record::Embed { embedding, .. } => EmbeddingVector::new(embedding.clone()).ok(),
            Record::Chat { .. } => None,
        }
    }
}

fn read_records(path: &Path, into: &mut HashMap<CacheKey, Record>) -> Result<(), ProviderError> {
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line) {
            Ok(rec) => {
                into.insert(rec.key(), rec);
            }
            Err(e) => log::warn!(
                "{}:{}: skipping unreadable record: {e}",
                path.display(),
                i + 1
            ),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub chat_entries: usize,
    pub embed_entries: usize,
    pub file_bytes: u64,
}

/// Append-only JSON-lines cache with an in-memory index. Later lines win.
#[derive(Debug)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    index: RwLock<HashMap<CacheKey, Record>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            index: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref().to_path_buf();
        let mut index = HashMap::new();
        if path.is_file() {
            read_records(&path, &mut index)?;
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            index: RwLock::new(index),
            writer: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    /// Read-only view of an existing cache file; nothing is ever written.
    pub fn open_read_only(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let mut index = HashMap::new();
        if path.as_ref().is_file() {
            read_records(path.as_ref(), &mut index)?;
        }
        Ok(Self {
            path: Some(path.as_ref().to_path_buf()),
            index: RwLock::new(index),
            writer: Mutex::new(None),
        })
    }

    pub fn get(&self, key: &CacheKey) -> Option<Record> {
        self.index
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(key)
            .cloned()
    }

    pub fn put(&self, record: Record) -> Result<(), ProviderError> {
        let line =
            serde_json::to_string(&record).map_err(|e| ProviderError::other(e.to_string()))?;
        {
            let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(w) = w.as_mut() {
                writeln!(w, "{line}")?;
                w.flush()?;
            }
        }
        self.index
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(record.key(), record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        let idx = self.index.read().unwrap_or_else(|e| e.into_inner());
        let chat_entries = idx.values().filter(|r| r.kind() == "chat").count();
        CacheStats {
            chat_entries,
            embed_entries: idx.len() - chat_entries,
            file_bytes: self
                .path
                .as_ref()
                .and_then(|p| std::fs::metadata(p).ok())
                .map_or(0, |m| m.len()),
        }
    }
}

/// Writes records as JSON-lines, creating parent directories.
pub fn record_fixture(path: impl AsRef<Path>, records: &[Record]) -> Result<(), ProviderError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| ProviderError::other(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a fixture file, or every `*.jsonl` file in a directory (sorted by
/// name).
pub fn load_fixture(path: impl AsRef<Path>) -> Result<Arc<FixtureStore>, ProviderError> {
    let path = path.as_ref();
    let mut records = HashMap::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        for f in files {
            read_records(&f, &mut records)?;
        }
    } else {
        read_records(path, &mut records)?;
    }
    Ok(Arc::new(FixtureStore { records }))
}

#[derive(Debug, Default)]
pub struct FixtureStore {
    records: HashMap<CacheKey, Record>,
}

impl FixtureStore {
    pub fn from_records(records: impl IntoIterator<Item = Record>) -> Arc<Self> {
        Arc::new(Self {
            records: records.into_iter().map(|r| (r.key(), r)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All records, sorted by key.
    pub fn records(&self) -> Vec<Record> {
        let mut v: Vec<(&CacheKey, &Record)> = self.records.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v.into_iter().map(|(_, r)| r.clone()).collect()
    }
}

/// Replay-only provider. Unknown requests fail with
/// [`ProviderError::FixtureMiss`].
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    store: Arc<FixtureStore>,
    config: ProviderConfig,
}

fn preview(s: &str) -> String {
    let mut p: String = s.chars().take(60).collect();
    if s.chars().count() > 60 {
        p.push('…');
    }
    p
}

impl FixtureProvider {
    pub fn new(store: Arc<FixtureStore>, config: ProviderConfig) -> Self {
        Self { store, config }
    }
}

impl ChatProvider for FixtureProvider {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn chat_complete(&self, prompt: &str) -> Result<ChatExchange, ProviderError> {
        let key = CacheKey::chat(&self.config, prompt);
        self.store
            .records
            .get(&key)
            .and_then(Record::to_exchange)
            .ok_or_else(|| ProviderError::FixtureMiss {
                kind: "chat",
                key: key.0,
                preview: preview(prompt),
            })
    }
}

impl EmbeddingProvider for FixtureProvider {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let vectors = texts
            .iter()
            .map(|t| {
                let key = CacheKey::embed(&self.config.model_id, t);
                self.store
                    .records
                    .get(&key)
                    .and_then(Record::to_vector)
                    .ok_or_else(|| ProviderError::FixtureMiss {
                        kind: "embed",
                        key: key.0,
                        preview: preview(t),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        check_dims(&vectors)?;
        Ok(vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chat_record(cfg: &ProviderConfig, prompt: &str, completion: &str) -> Record {
        Record::from_exchange(
            cfg,
            &ChatExchange {
                prompt: prompt.into(),
                completion: completion.into(),
                model_id: cfg.model_id.clone(),
                token_usage: TokenUsage {
                    prompt_tokens: 3,
                    completion_tokens: 4,
                    total_tokens: 7,
                },
                latency_ms: 12,
            },
        )
    }

    #[test]
    fn fixture_round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ProviderConfig::default();
        let recs = vec![
            chat_record(&cfg, "p1", "c1 \u{2014} \"raw\"\n"),
            chat_record(&cfg, "p2", "c2"),
            Record::embedding("emb", "a", &[0.1, 0.2, 0.3, 0.4]),
            Record::embedding("emb", "b", &[1.0, 0.0, -0.5, 1e-17]),
            Record::embedding("emb", "c", &[0.0, 0.0, 0.0, 1.0]),
        ];
        let path = dir.path().join("fx/one.jsonl");
        record_fixture(&path, &recs).unwrap();
        let store = load_fixture(&path).unwrap();
        let mut expected = recs.clone();
        expected.sort_by_key(Record::key);
        assert_eq!(store.records(), expected);

        let chat = FixtureProvider::new(store.clone(), cfg.clone());
        let ex = chat.chat_complete("p1").unwrap();
        assert_eq!(ex.completion, "c1 \u{2014} \"raw\"\n");
        assert_eq!(ex.token_usage.total_tokens, 7);
        let miss = chat.chat_complete("unknown").unwrap_err();
        assert!(miss.to_string().contains("fixture miss"));

        let mut emb_cfg = cfg.clone();
        emb_cfg.model_id = "emb".into();
        let emb = FixtureProvider::new(store, emb_cfg);
        let v = emb
            .embed_texts(&["a".into(), "b".into(), "c".into()])
            .unwrap();
        assert_eq!(v[1].values(), &[1.0, 0.0, -0.5, 1e-17]);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn temperature_change_misses_fixture() {
        let cfg = ProviderConfig::default();
        let store = FixtureStore::from_records([chat_record(&cfg, "p", "c")]);
        let mut hot = cfg.clone();
        hot.temperature = 0.2;
        assert!(FixtureProvider::new(store.clone(), hot)
            .chat_complete("p")
            .is_err());
        assert!(FixtureProvider::new(store, cfg).chat_complete("p").is_ok());
    }

    #[test]
    fn cache_persists_and_last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cfg = ProviderConfig::default();
        {
            let c = ResponseCache::open(&path).unwrap();
            c.put(chat_record(&cfg, "p", "first")).unwrap();
            c.put(chat_record(&cfg, "p", "second")).unwrap();
            c.put(Record::embedding("e", "t", &[1.0])).unwrap();
        }
        let c = ResponseCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        let got = c.get(&CacheKey::chat(&cfg, "p")).unwrap();
        assert_eq!(got.to_exchange().unwrap().completion, "second");
        let s = c.stats();
        assert_eq!((s.chat_entries, s.embed_entries), (1, 1));
        assert!(s.file_bytes > 0);
    }
}
