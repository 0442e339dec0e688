use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("service not configured: {0} is unset")]
    NotConfigured(&'static str),
    #[error("service returned status {0}")]
    Status(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response body: {0}")]
    Body(String),
}

/// A text-completion service.
pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

/// Completion endpoint speaking the common `{model, prompt}` →
/// `{choices: [{text}]}` JSON shape.
#[derive(Debug, Clone)]
pub struct HttpCompletionClient {
    url: String,
    model: String,
    key: Option<String>,
    max_tokens: u32,
    http: reqwest::blocking::Client,
}

impl HttpCompletionClient {
    pub fn new(url: &str, model: &str, key: Option<String>, timeout: Duration) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(HttpCompletionClient {
            url: url.to_string(),
            model: model.to_string(),
            key,
            max_tokens: 2048,
            http,
        })
    }

    /// Configure from NAVPRUNE_LLM_URL, NAVPRUNE_LLM_MODEL and the optional
    /// NAVPRUNE_LLM_KEY.
    pub fn from_env() -> Result<Self, ClientError> {
        let url = std::env::var("NAVPRUNE_LLM_URL").map_err(|_| ClientError::NotConfigured("NAVPRUNE_LLM_URL"))?;
        let model =
            std::env::var("NAVPRUNE_LLM_MODEL").map_err(|_| ClientError::NotConfigured("NAVPRUNE_LLM_MODEL"))?;
        let key = std::env::var("NAVPRUNE_LLM_KEY").ok().filter(|k| !k.is_empty());
        Self::new(&url, &model, key, Duration::from_secs(60))
    }

    pub fn model(&self) -> &str {
        &self.model
    }
}

impl CompletionClient for HttpCompletionClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": self.max_tokens,
            "temperature": 0,
        });
        let mut req = self.http.post(&self.url).json(&body);
        if let Some(k) = &self.key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError::Status(status.as_u16()));
        }
        let v: Value = resp.json().map_err(|e| ClientError::Body(e.to_string()))?;
        v["choices"][0]["text"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Body(v.to_string()))
    }
}
