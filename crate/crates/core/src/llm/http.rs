//! OpenAI-compatible chat-completions backend.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, LlmError};

pub const API_KEY_ENV: &str = "LLM_API_KEY";

pub struct HttpBackend {
    client: Client,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    /// `base_url` is the API root, e.g. `https://api.openai.com/v1`.
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, LlmError> {
        let client = Client::builder().timeout(timeout).build().map_err(|e| LlmError::InvalidRequest(e.to_string()))?;
        let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
        Ok(Self { client, url, api_key })
    }

    /// Reads the key from `LLM_API_KEY`.
    pub fn from_env(base_url: &str, timeout: Duration) -> Result<Self, LlmError> {
        Self::new(base_url, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()), timeout)
    }
}

fn is_transient(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| LlmError::Transient(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| LlmError::Transient(e.to_string()))?;
        if is_transient(status) {
            return Err(LlmError::Transient(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(LlmError::Api { status: status.as_u16(), body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| LlmError::Api { status: status.as_u16(), body: format!("{e}: {text}") })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Api { status: status.as_u16(), body: format!("no message content: {text}") })
    }
}
