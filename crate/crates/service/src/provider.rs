//! QE providers backed by an HTTP endpoint or local files.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use esa_core::qe::{CachedProvider, MockProvider, ProviderError, QeProvider};
use serde_json::{json, Value};

use crate::config::{ProviderConfig, ProviderKind};
use crate::ServiceError;

/// OpenAI-compatible chat completion client with deterministic sampling.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    token: Option<String>,
    retries: u32,
    backoff: Duration,
}

impl HttpProvider {
    pub fn new(
        base_url: &str,
        model: &str,
        token: Option<String>,
        timeout: Duration,
        retries: u32,
    ) -> Result<Self, ServiceError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ServiceError::Config(format!("http client: {e}")))?;
        Ok(HttpProvider {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            token,
            retries,
            backoff: Duration::from_millis(500),
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn attempt(&self, prompt: &str) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Request(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ProviderError::Request(format!("HTTP {status}")));
        }
        let value: Value = resp.json().map_err(|e| ProviderError::Request(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(String::from)
            .ok_or_else(|| ProviderError::Request("response has no message content".into()))
    }
}

impl QeProvider for HttpProvider {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let mut last = ProviderError::Request("no attempt".into());
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * attempt);
            }
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("QE request attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(last)
    }
}

/// Answers every prompt with an empty error list.
struct NoPrefill;

impl QeProvider for NoPrefill {
    fn complete(&self, _prompt: &str) -> Result<String, ProviderError> {
        Ok(String::new())
    }
}

/// Builds the configured provider, wrapped in a response cache when a cache
/// directory is set. The HTTP token is read from the configured variable.
pub fn build_provider(cfg: &ProviderConfig) -> Result<Arc<dyn QeProvider>, ServiceError> {
    let inner: Arc<dyn QeProvider> = match cfg.kind {
        ProviderKind::None => Arc::new(NoPrefill),
        ProviderKind::Mock => match &cfg.mock_dir {
            Some(dir) => Arc::new(MockProvider::from_dir(dir).map_err(|e| ServiceError::io(dir, e))?),
            None => Arc::new(MockProvider::new()),
        },
        ProviderKind::Http => {
            let base = cfg
                .base_url
                .as_deref()
                .ok_or_else(|| ServiceError::Config("http provider needs base_url".into()))?;
            let token = std::env::var(&cfg.token_env).ok();
            if token.is_none() {
                log::warn!("{} is not set; sending unauthenticated requests", cfg.token_env);
            }
            Arc::new(HttpProvider::new(
                base,
                cfg.model.as_deref().unwrap_or("gpt-4"),
                token,
                Duration::from_secs(cfg.timeout_secs),
                cfg.retries,
            )?)
        }
    };
    match &cfg.cache_dir {
        Some(dir) => Ok(Arc::new(
            CachedProvider::new(inner, dir.clone()).map_err(|e| ServiceError::io(dir, e))?,
        )),
        None => Ok(inner),
    }
}
