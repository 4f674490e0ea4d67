use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use divex_core::provider::{
    load_fixture, ChatProvider, EmbeddingProvider, FixtureProvider, HttpProvider, OfflineTransport,
    ReqwestTransport, ResponseCache, API_KEY_ENV,
};

use crate::settings::Settings;
use crate::UsageError;

/// Chat and embedding backends for one command.
pub struct Backend {
    pub kind: &'static str,
    pub chat: Box<dyn ChatProvider>,
    pub embed: Box<dyn EmbeddingProvider>,
}

impl Backend {
    pub fn new(
        kind: &'static str,
        chat: Box<dyn ChatProvider>,
        embed: Box<dyn EmbeddingProvider>,
    ) -> Self {
        Self { kind, chat, embed }
    }

    /// `--fixtures` replays recorded exchanges; `--offline` serves only the
    /// response cache; otherwise requests go over HTTP with the key from
    /// the environment.
    pub fn select(settings: &Settings, fixtures: Option<&Path>, offline: bool) -> Result<Self> {
        if let Some(dir) = fixtures {
            if !dir.exists() {
                return Err(
                    UsageError(format!("fixtures path {} does not exist", dir.display())).into(),
                );
            }
            let store = load_fixture(dir)
                .with_context(|| format!("loading fixtures from {}", dir.display()))?;
            return Ok(Self::new(
                "fixtures",
                Box::new(FixtureProvider::new(
                    store.clone(),
                    settings.provider.clone(),
                )),
                Box::new(FixtureProvider::new(store, settings.embedding.clone())),
            ));
        }
        if offline {
            let cache = Arc::new(ResponseCache::open_read_only(&settings.cache)?);
            return Ok(Self::new(
                "offline",
                Box::new(HttpProvider::new(
                    settings.provider.clone(),
                    OfflineTransport,
                    cache.clone(),
                    None,
                    settings.concurrency,
                )?),
                Box::new(HttpProvider::new(
                    settings.embedding.clone(),
                    OfflineTransport,
                    cache,
                    None,
                    settings.concurrency,
                )?),
            ));
        }
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty());
        if key.is_none() {
            log::warn!("{API_KEY_ENV} is not set; requests are sent without credentials");
        }
        let cache = Arc::new(
            ResponseCache::open(&settings.cache)
                .with_context(|| format!("opening cache {}", settings.cache.display()))?,
        );
        Ok(Self::new(
            "http",
            Box::new(HttpProvider::new(
                settings.provider.clone(),
                ReqwestTransport::new()?,
                cache.clone(),
                key.clone(),
                settings.concurrency,
            )?),
            Box::new(HttpProvider::new(
                settings.embedding.clone(),
                ReqwestTransport::new()?,
                cache,
                key,
                settings.concurrency,
            )?),
        ))
    }
}
