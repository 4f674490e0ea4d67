use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use thiserror::Error;

use super::{
    check_dims, CacheKey, ChatExchange, ChatProvider, EmbeddingProvider, Limiter, ProviderConfig,
    ProviderError, Record, ResponseCache, TokenUsage,
};
use crate::metrics::EmbeddingVector;

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Error)]
pub enum TransportError {
    /// Connection reset, timeout and similar; retried.
    #[error("transient transport failure: {0}")]
    Transient(String),
    #[error("network disabled")]
    Disabled,
    #[error("transport failure: {0}")]
    Fatal(String),
}

/// Minimal blocking HTTP surface, swappable in tests.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(key) = bearer {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                TransportError::Transient(e.to_string())
            } else {
                TransportError::Fatal(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp
            .text()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

/// Refuses every request. Used for `--offline` runs backed only by the cache.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineTransport;

impl Transport for OfflineTransport {
    fn post_json(
        &self,
        _: &str,
        _: Option<&str>,
        _: &Value,
        _: Duration,
    ) -> Result<HttpResponse, TransportError> {
        Err(TransportError::Disabled)
    }
}

pub struct HttpProvider<T: Transport> {
    config: ProviderConfig,
    transport: T,
    cache: Arc<ResponseCache>,
    api_key: Option<String>,
    limiter: Limiter,
}

impl<T: Transport> HttpProvider<T> {
    /// `max_in_flight` bounds concurrent requests (4 is a sensible default).
    pub fn new(
        config: ProviderConfig,
        transport: T,
        cache: Arc<ResponseCache>,
        api_key: Option<String>,
        max_in_flight: usize,
    ) -> Result<Self, ProviderError> {
        config.validate()?;
        Ok(Self {
            config,
            transport,
            cache,
            api_key,
            limiter: Limiter::new(max_in_flight),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(
            self.config
                .retry_base_ms
                .saturating_mul(1u64 << attempt.min(16)),
        )
    }

    /// POST with retries on 429, 5xx and transient transport failures.
    fn post_with_retry(&self, url: &str, body: &Value) -> Result<String, ProviderError> {
        let _permit = self.limiter.acquire();
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.transport.post_json(
                url,
                self.api_key.as_deref(),
                body,
                self.config.timeout(),
            ) {
                Ok(resp) if (200..300).contains(&resp.status) => return Ok(resp.body),
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last = format!("HTTP {}", resp.status);
                }
                Ok(resp) => {
                    return Err(ProviderError::Status {
                        status: resp.status,
                        body: resp.body,
                    })
                }
                Err(TransportError::Disabled) => return Err(ProviderError::Offline),
                Err(TransportError::Fatal(e)) => return Err(ProviderError::other(e)),
                Err(TransportError::Transient(e)) => last = e,
            }
            if attempt + 1 < attempts {
                log::debug!("retrying {url} after {last}");
                std::thread::sleep(self.backoff(attempt));
            }
        }
        Err(ProviderError::Exhausted { attempts, last })
    }
}

fn parse_chat_body(body: &str) -> Result<(String, TokenUsage), ProviderError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))?;
    let usage = v.get("usage");
    let field = |name: &str| {
        usage
            .and_then(|u| u.get(name))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    Ok((
        content.to_string(),
        TokenUsage {
            prompt_tokens: field("prompt_tokens"),
            completion_tokens: field("completion_tokens"),
            total_tokens: field("total_tokens"),
        },
    ))
}

fn parse_embedding_body(body: &str, expected: usize) -> Result<Vec<Vec<f64>>, ProviderError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
    let data = v
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| ProviderError::Malformed("missing data array".into()))?;
    if data.len() != expected {
        return Err(ProviderError::Malformed(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    let mut out: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
    for (i, item) in data.iter().enumerate() {
        let idx = item
            .get("index")
            .and_then(Value::as_u64)
            .map_or(i, |x| x as usize);
        let values = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Malformed(format!("data[{i}].embedding missing")))?
            .iter()
            .map(|x| {
                x.as_f64().ok_or_else(|| {
                    ProviderError::Malformed(format!("data[{i}] has a non-numeric value"))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        out.push((idx, values));
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, v)| v).collect())
}

impl<T: Transport> ChatProvider for HttpProvider<T> {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn chat_complete(&self, prompt: &str) -> Result<ChatExchange, ProviderError> {
        let key = CacheKey::chat(&self.config, prompt);
        if let Some(Record::Chat {
            completion,
            token_usage,
            latency_ms,
            ..
        }) = self.cache.get(&key)
        {
            return Ok(ChatExchange {
                prompt: prompt.to_string(),
                completion,
                model_id: self.config.model_id.clone(),
                token_usage,
                latency_ms,
            });
        }
        let body = json!({
            "model": self.config.model_id,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "max_tokens": self.config.max_tokens,
        });
        let started = Instant::now();
        let raw = self.post_with_retry(&self.url("chat/completions"), &body)?;
        let (completion, token_usage) = parse_chat_body(&raw)?;
        let ex = ChatExchange {
            prompt: prompt.to_string(),
            completion,
            model_id: self.config.model_id.clone(),
            token_usage,
            latency_ms: started.elapsed().as_millis() as u64,
        };
        self.cache.put(Record::from_exchange(&self.config, &ex))?;
        Ok(ex)
    }
}

impl<T: Transport> EmbeddingProvider for HttpProvider<T> {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let model = &self.config.model_id;
        let mut found: Vec<Option<Vec<f64>>> = texts
            .iter()
            .map(|t| match self.cache.get(&CacheKey::embed(model, t)) {
                Some(Record::Embed { embedding, .. }) => Some(embedding),
                _ => None,
            })
            .collect();
        let mut missing: Vec<&String> = Vec::new();
        for (t, f) in texts.iter().zip(&found) {
            if f.is_none() && !missing.contains(&t) {
                missing.push(t);
            }
        }
        if !missing.is_empty() {
            let body = json!({ "model": model, "input": missing });
            let raw = self.post_with_retry(&self.url("embeddings"), &body)?;
            let vectors = parse_embedding_body(&raw, missing.len())?;
            for (t, v) in missing.iter().zip(vectors) {
                self.cache.put(Record::embedding(model, t, &v))?;
                for (slot, text) in found.iter_mut().zip(texts) {
                    if slot.is_none() && text == *t {
                        *slot = Some(v.clone());
                    }
                }
            }
        }
        let vectors = found
            .into_iter()
            .map(|v| {
                EmbeddingVector::new(v.unwrap_or_default())
                    .map_err(|e| ProviderError::Malformed(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        check_dims(&vectors)?;
        Ok(vectors)
    }
}
