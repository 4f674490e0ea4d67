//! Chat-completion and embedding providers.
//!
//! Every backend implements [`ChatProvider`] and/or [`EmbeddingProvider`]:
//!
//! * [`HttpProvider`] speaks the common chat-completions / embeddings JSON
//!   schema over a pluggable [`Transport`], with a content-addressed
//!   [`ResponseCache`] and exponential-backoff retries.
//! * [`FixtureProvider`] replays recorded exchanges and never touches the
//!   network.
//! * [`RecordingProvider`] wraps another provider and captures exchanges so
//!   they can be written out as fixtures.
//! * [`ScriptedProvider`] answers from closures, for tests and fixture
//!   generation.

mod cache;
mod http;

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::EmbeddingVector;

pub use cache::{
    load_fixture, record_fixture, CacheStats, FixtureProvider, FixtureStore, Record, ResponseCache,
};
pub use http::{
    HttpProvider, HttpResponse, OfflineTransport, ReqwestTransport, Transport, TransportError,
};

pub const API_KEY_ENV: &str = "DIVEX_API_KEY";

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("fixture miss: no recorded {kind} response for key {key} ({preview:?})")]
    FixtureMiss {
        kind: &'static str,
        key: String,
        preview: String,
    },
    #[error("request failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    Malformed(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no texts to embed")]
    EmptyInput,
    #[error("network access disabled (offline mode)")]
    Offline,
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("cache I/O: {0}")]
    Cache(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl ProviderError {
    pub fn other(msg: impl Into<String>) -> Self {
        ProviderError::Other(msg.into())
    }
}

/// Endpoint and decoding parameters for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry.
    pub retry_base_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".to_string(),
            model_id: "gpt-4".to_string(),
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 2048,
            timeout_ms: 120_000,
            max_retries: 4,
            retry_base_ms: 500,
        }
    }
}

impl ProviderConfig {
    pub fn embedding_default() -> Self {
        Self {
            model_id: "sentence-transformers/all-distilroberta-v1".to_string(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ProviderError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ProviderError::Config(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::Config("max_tokens must be positive".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(ProviderError::Config("model id is empty".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub prompt: String,
    /// Raw completion text, unmodified.
    pub completion: String,
    pub model_id: String,
    pub token_usage: TokenUsage,
    pub latency_ms: u64,
}

/// Content address of a request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(pub String);

fn put_field(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

impl CacheKey {
    /// SHA-256 over the endpoint kind, model and decoding parameters and the
    /// prompt bytes, each length-prefixed.
    pub fn chat(config: &ProviderConfig, prompt: &str) -> Self {
        Self::chat_parts(
            &config.model_id,
            config.temperature,
            config.top_p,
            config.max_tokens,
            prompt,
        )
    }

    pub fn chat_parts(
        model_id: &str,
        temperature: f64,
        top_p: f64,
        max_tokens: u32,
        prompt: &str,
    ) -> Self {
        let mut h = Sha256::new();
        put_field(&mut h, b"chat");
        put_field(&mut h, model_id.as_bytes());
        put_field(&mut h, &temperature.to_bits().to_le_bytes());
        put_field(&mut h, &top_p.to_bits().to_le_bytes());
        put_field(&mut h, &max_tokens.to_le_bytes());
        put_field(&mut h, prompt.as_bytes());
        CacheKey(hex::encode(h.finalize()))
    }

    /// Embeddings do not depend on decoding parameters, so only the model
    /// and text are hashed.
    pub fn embed(model_id: &str, text: &str) -> Self {
        let mut h = Sha256::new();
        put_field(&mut h, b"embed");
        put_field(&mut h, model_id.as_bytes());
        put_field(&mut h, text.as_bytes());
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub trait ChatProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn chat_complete(&self, prompt: &str) -> Result<ChatExchange, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    /// One vector per input text, all of equal dimension.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
}

impl<T: ChatProvider + ?Sized> ChatProvider for std::sync::Arc<T> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn chat_complete(&self, prompt: &str) -> Result<ChatExchange, ProviderError> {
        (**self).chat_complete(prompt)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<T> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed_texts(texts)
    }
}

pub(crate) fn check_dims(vectors: &[EmbeddingVector]) -> Result<(), ProviderError> {
    if let Some(first) = vectors.first() {
        let expected = first.dim();
        if let Some(bad) = vectors.iter().find(|v| v.dim() != expected) {
            return Err(ProviderError::DimensionMismatch {
                expected,
                got: bad.dim(),
            });
        }
    }
    Ok(())
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Limiter {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.cv.notify_one();
    }
}

/// Wraps providers and keeps every exchange for later [`record_fixture`].
pub struct RecordingProvider<'a> {
    chat: Option<(&'a dyn ChatProvider, ProviderConfig)>,
    embed: Option<(&'a dyn EmbeddingProvider, ProviderConfig)>,
    records: Mutex<Vec<Record>>,
}

impl<'a> RecordingProvider<'a> {
    pub fn new() -> Self {
        Self {
            chat: None,
            embed: None,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn with_chat(mut self, inner: &'a dyn ChatProvider, config: ProviderConfig) -> Self {
        self.chat = Some((inner, config));
        self
    }

    pub fn with_embed(mut self, inner: &'a dyn EmbeddingProvider, config: ProviderConfig) -> Self {
        self.embed = Some((inner, config));
        self
    }

    /// Recorded exchanges, first occurrence per key, in call order.
    pub fn records(&self) -> Vec<Record> {
        let recs = self.records.lock().unwrap_or_else(|e| e.into_inner());
        let mut seen = std::collections::HashSet::new();
        recs.iter()
            .filter(|r| seen.insert(r.key()))
            .cloned()
            .collect()
    }

    pub fn write_fixture(&self, path: impl AsRef<Path>) -> Result<(), ProviderError> {
        record_fixture(path, &self.records())
    }
}

impl Default for RecordingProvider<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatProvider for RecordingProvider<'_> {
    fn model_id(&self) -> &str {
        self.chat.as_ref().map_or("", |(_, c)| c.model_id.as_str())
    }

    fn chat_complete(&self, prompt: &str) -> Result<ChatExchange, ProviderError> {
        let (inner, config) = self
            .chat
            .as_ref()
            .ok_or_else(|| ProviderError::other("recording provider has no chat backend"))?;
        let ex = inner.chat_complete(prompt)?;
        self.records
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(Record::from_exchange(config, &ex));
        Ok(ex)
    }
}

impl EmbeddingProvider for RecordingProvider<'_> {
    fn model_id(&self) -> &str {
        self.embed.as_ref().map_or("", |(_, c)| c.model_id.as_str())
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let (inner, config) = self
            .embed
            .as_ref()
            .ok_or_else(|| ProviderError::other("recording provider has no embedding backend"))?;
        let vectors = inner.embed_texts(texts)?;
        let mut recs = self.records.lock().unwrap_or_else(|e| e.into_inner());
        for (t, v) in texts.iter().zip(&vectors) {
            recs.push(Record::embedding(&config.model_id, t, v.values()));
        }
        Ok(vectors)
    }
}

type ChatFn = dyn Fn(&str) -> Result<String, ProviderError> + Send + Sync;
type EmbedFn = dyn Fn(&str) -> Vec<f64> + Send + Sync;

/// Provider answering from closures. Keeps a log of prompts it was sent.
pub struct ScriptedProvider {
    model_id: String,
    chat: Option<Box<ChatFn>>,
    embed: Option<Box<EmbedFn>>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedProvider {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            chat: None,
            embed: None,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn with_chat<F>(mut self, f: F) -> Self
    where
        F: Fn(&str) -> Result<String, ProviderError> + Send + Sync + 'static,
    {
        self.chat = Some(Box::new(f));
        self
    }

    pub fn with_embed<F>(mut self, f: F) -> Self
    where
        F: Fn(&str) -> Vec<f64> + Send + Sync + 'static,
    {
        self.embed = Some(Box::new(f));
        self
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }
}

impl ChatProvider for ScriptedProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn chat_complete(&self, prompt: &str) -> Result<ChatExchange, ProviderError> {
        let f = self
            .chat
            .as_ref()
            .ok_or_else(|| ProviderError::other("scripted provider has no chat script"))?;
        self.prompts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(prompt.to_string());
        let completion = f(prompt)?;
        Ok(ChatExchange {
            prompt: prompt.to_string(),
            completion,
            model_id: self.model_id.clone(),
            token_usage: TokenUsage::default(),
            latency_ms: 0,
        })
    }
}

impl EmbeddingProvider for ScriptedProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let f = self
            .embed
            .as_ref()
            .ok_or_else(|| ProviderError::other("scripted provider has no embedding script"))?;
        let vectors: Vec<EmbeddingVector> = texts
            .iter()
            .map(|t| {
                EmbeddingVector::new(f(t)).map_err(|e| ProviderError::Malformed(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        check_dims(&vectors)?;
        Ok(vectors)
    }
}
