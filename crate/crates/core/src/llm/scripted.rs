//! Deterministic test backend driven by per-tag rules.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{ChatBackend, ChatRequest, LlmError};

type ResponderFn = Arc<dyn Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync>;

#[derive(Clone)]
pub enum Responder {
    Fixed(String),
    /// Answers in order; the last answer repeats.
    Sequence(Vec<String>),
    /// `failures` transient errors, then `then` forever.
    FailThen { failures: usize, then: String },
    Func(ResponderFn),
}

impl Responder {
    pub fn fixed(s: impl Into<String>) -> Self {
        Responder::Fixed(s.into())
    }

    pub fn sequence<I: IntoIterator<Item = S>, S: Into<String>>(items: I) -> Self {
        Responder::Sequence(items.into_iter().map(Into::into).collect())
    }

    pub fn fail_then(failures: usize, then: impl Into<String>) -> Self {
        Responder::FailThen { failures, then: then.into() }
    }

    pub fn func(f: impl Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync + 'static) -> Self {
        Responder::Func(Arc::new(f))
    }
}

/// Picks the rule with the longest tag prefix matching the request.
#[derive(Default)]
pub struct ScriptedBackend {
    rules: Vec<(String, Responder)>,
    counters: Mutex<HashMap<usize, usize>>,
    delay: Duration,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on(mut self, tag_prefix: impl Into<String>, responder: Responder) -> Self {
        self.rules.push((tag_prefix.into(), responder));
        self
    }

    /// Sleeps this long inside every call, to make overlap observable.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Highest number of calls seen running at once.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn respond(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let Some((idx, (_, responder))) = self
            .rules
            .iter()
            .enumerate()
            .filter(|(_, (p, _))| request.tag.starts_with(p.as_str()))
            .max_by_key(|(i, (p, _))| (p.len(), std::cmp::Reverse(*i)))
        else {
            return Err(LlmError::Api { status: 404, body: format!("no script for tag {}", request.tag) });
        };
        let seen = {
            let mut counters = self.counters.lock().unwrap();
            let c = counters.entry(idx).or_default();
            *c += 1;
            *c - 1
        };
        match responder {
            Responder::Fixed(s) => Ok(s.clone()),
            Responder::Sequence(items) => {
                items.get(seen).or(items.last()).cloned().ok_or_else(|| LlmError::Api { status: 404, body: "empty script".into() })
            }
            Responder::FailThen { failures, then } => {
                if seen < *failures {
                    Err(LlmError::Transient(format!("scripted failure {}", seen + 1)))
                } else {
                    Ok(then.clone())
                }
            }
            Responder::Func(f) => f(request),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let out = self.respond(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn req(tag: &str) -> ChatRequest {
        ChatRequest { messages: vec![ChatMessage::user("x")], model: "m".into(), temperature: 0.0, max_tokens: 10, tag: tag.into() }
    }

    #[test]
    fn longest_prefix_wins() {
        let b = ScriptedBackend::new().on("P", Responder::fixed("any")).on("P6", Responder::fixed("six"));
        assert_eq!(b.complete(&req("P6:region")).unwrap(), "six");
        assert_eq!(b.complete(&req("P7")).unwrap(), "any");
        assert!(b.complete(&req("X")).is_err());
    }

    #[test]
    fn sequences_repeat_last() {
        let b = ScriptedBackend::new().on("P", Responder::sequence(["a", "b"]));
        let got: Vec<String> = (0..3).map(|_| b.complete(&req("P")).unwrap()).collect();
        assert_eq!(got, ["a", "b", "b"]);
    }
}
