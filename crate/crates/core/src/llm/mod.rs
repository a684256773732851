//! Chat-completion boundary. Everything above this module talks to a
//! [`LlmClient`], which wraps a [`ChatBackend`] with retries, backoff, and a
//! bound on concurrent requests.

mod cassette;
mod conversation;
mod http;
pub mod mock;
mod scripted;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cassette::{cassette_key, load_cassette, CassetteEntry, RecordingBackend, ReplayBackend};
pub use conversation::{Answer, Conversation};
pub use http::HttpBackend;
pub use scripted::{Responder, ScriptedBackend};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    /// Timeouts, 429s, and 5xx responses. Retried by the client.
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("API error {status}: {body}")]
    Api { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("no cassette entry for {tag} ({key})")]
    ReplayMiss { tag: String, key: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cassette I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Names the prompt kind, e.g. `P2:category:transition`. Used for
    /// cassette keys and call accounting.
    pub tag: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        Ok(())
    }

    /// Content of the last user message.
    pub fn last_user(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("")
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientPolicy {
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub max_in_flight: usize,
}

impl Default for ClientPolicy {
    fn default() -> Self {
        Self { timeout_ms: 60_000, max_retries: 3, backoff_base_ms: 500, backoff_cap_ms: 8_000, max_in_flight: 4 }
    }
}

impl ClientPolicy {
    /// No waiting between retries; for tests and offline backends.
    pub fn immediate() -> Self {
        Self { backoff_base_ms: 0, backoff_cap_ms: 0, ..Self::default() }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_cap_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self { model: "gpt-3.5-turbo".into(), temperature: 0.0, max_tokens: 1024 }
    }
}

/// One finished exchange, kept when capture is on.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub request: ChatRequest,
    pub response: Result<String, LlmError>,
}

#[derive(Default)]
struct Log {
    calls: BTreeMap<String, usize>,
    retries: usize,
    captured: Vec<Exchange>,
}

/// Stateless client: callers pass the whole dialogue with every request.
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    policy: ClientPolicy,
    settings: ChatSettings,
    in_flight: Mutex<usize>,
    slot_freed: Condvar,
    capture: bool,
    log: Mutex<Log>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient").field("policy", &self.policy).field("settings", &self.settings).finish()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>, policy: ClientPolicy, settings: ChatSettings) -> Self {
        assert!(policy.max_in_flight >= 1, "in-flight bound must be at least 1");
        Self {
            backend,
            policy,
            settings,
            in_flight: Mutex::new(0),
            slot_freed: Condvar::new(),
            capture: false,
            log: Mutex::default(),
        }
    }

    /// Keeps every request and response for later inspection.
    pub fn with_capture(mut self) -> Self {
        self.capture = true;
        self
    }

    pub fn settings(&self) -> &ChatSettings {
        &self.settings
    }

    pub fn policy(&self) -> &ClientPolicy {
        &self.policy
    }

    pub fn request(&self, messages: Vec<ChatMessage>, tag: impl Into<String>) -> ChatRequest {
        ChatRequest {
            messages,
            model: self.settings.model.clone(),
            temperature: self.settings.temperature,
            max_tokens: self.settings.max_tokens,
            tag: tag.into(),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.policy.max_in_flight {
                n = self.slot_freed.wait(n).unwrap();
            }
            *n += 1;
        }
        let result = self.attempt(request);
        {
            *self.in_flight.lock().unwrap() -= 1;
            self.slot_freed.notify_one();
        }
        let mut log = self.log.lock().unwrap();
        *log.calls.entry(request.tag.clone()).or_default() += 1;
        if self.capture {
            log.captured.push(Exchange { request: request.clone(), response: result.clone() });
        }
        result
    }

    fn attempt(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut retry = 0;
        loop {
            match self.backend.complete(request) {
                Err(LlmError::Transient(msg)) => {
                    if retry >= self.policy.max_retries {
                        return Err(LlmError::Transport { attempts: retry + 1, last: msg });
                    }
                    tracing::debug!(tag = %request.tag, retry, "transient failure: {msg}");
                    std::thread::sleep(self.policy.backoff(retry));
                    retry += 1;
                    self.log.lock().unwrap().retries += 1;
                }
                other => return other,
            }
        }
    }

    /// Completed calls per tag.
    pub fn call_counts(&self) -> BTreeMap<String, usize> {
        self.log.lock().unwrap().calls.clone()
    }

    /// Completed calls whose tag starts with `prefix`.
    pub fn count_calls(&self, prefix: &str) -> usize {
        self.log.lock().unwrap().calls.iter().filter(|(t, _)| t.starts_with(prefix)).map(|(_, n)| n).sum()
    }

    pub fn total_calls(&self) -> usize {
        self.log.lock().unwrap().calls.values().sum()
    }

    pub fn retries(&self) -> usize {
        self.log.lock().unwrap().retries
    }

    /// Captured exchanges; empty unless built `with_capture`.
    pub fn captured(&self) -> Vec<Exchange> {
        self.log.lock().unwrap().captured.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(backend: ScriptedBackend, policy: ClientPolicy) -> LlmClient {
        LlmClient::new(Arc::new(backend), policy, ChatSettings::default())
    }

    #[test]
    fn scripted_echo() {
        let c = client(ScriptedBackend::new().on("P6", Responder::fixed("Gym")), ClientPolicy::immediate());
        let req = c.request(vec![ChatMessage::user("hi")], "P6:category");
        assert_eq!(c.complete(&req).unwrap(), "Gym");
        assert_eq!(c.count_calls("P6"), 1);
    }

    #[test]
    fn retries_then_succeeds() {
        let policy = ClientPolicy { max_retries: 3, ..ClientPolicy::immediate() };
        let c = client(ScriptedBackend::new().on("P", Responder::fail_then(2, "ok")), policy);
        let req = c.request(vec![ChatMessage::user("x")], "P2");
        assert_eq!(c.complete(&req).unwrap(), "ok");
        assert_eq!(c.retries(), 2);
    }

    #[test]
    fn retries_exhausted() {
        let policy = ClientPolicy { max_retries: 1, ..ClientPolicy::immediate() };
        let c = client(ScriptedBackend::new().on("P", Responder::fail_then(5, "ok")), policy);
        let req = c.request(vec![ChatMessage::user("x")], "P2");
        assert!(matches!(c.complete(&req), Err(LlmError::Transport { attempts: 2, .. })));
    }

    #[test]
    fn api_errors_are_not_retried() {
        let backend = ScriptedBackend::new().on("P", Responder::func(|_| Err(LlmError::Api { status: 400, body: "bad".into() })));
        let c = client(backend, ClientPolicy::immediate());
        let req = c.request(vec![ChatMessage::user("x")], "P2");
        assert!(matches!(c.complete(&req), Err(LlmError::Api { status: 400, .. })));
        assert_eq!(c.retries(), 0);
    }

    #[test]
    fn request_validation() {
        let c = client(ScriptedBackend::new(), ClientPolicy::immediate());
        assert!(c.complete(&c.request(vec![], "P2")).is_err());
        let mut req = c.request(vec![ChatMessage::user("x")], "P2");
        req.temperature = 3.0;
        assert!(matches!(c.complete(&req), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn backoff_is_capped() {
        let p = ClientPolicy { backoff_base_ms: 100, backoff_cap_ms: 1000, ..ClientPolicy::default() };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(3), Duration::from_millis(800));
        assert_eq!(p.backoff(4), Duration::from_millis(1000));
        assert_eq!(p.backoff(200), Duration::from_millis(1000));
    }

    #[test]
    fn in_flight_bound_holds() {
        let backend = Arc::new(ScriptedBackend::new().on("P", Responder::fixed("x")).with_delay(Duration::from_millis(5)));
        let policy = ClientPolicy { max_in_flight: 3, ..ClientPolicy::immediate() };
        let c = LlmClient::new(backend.clone(), policy, ChatSettings::default());
        std::thread::scope(|s| {
            for _ in 0..12 {
                s.spawn(|| {
                    for _ in 0..5 {
                        c.complete(&c.request(vec![ChatMessage::user("x")], "P7")).unwrap();
                    }
                });
            }
        });
        assert_eq!(c.total_calls(), 60);
        assert!(backend.peak_in_flight() <= 3, "peak {}", backend.peak_in_flight());
        assert!(backend.peak_in_flight() >= 2);
    }
}
