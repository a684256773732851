//! Record/replay of chat exchanges as NDJSON cassettes.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, LlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub request: ChatRequest,
    pub response: String,
    pub timestamp: DateTime<Utc>,
}

/// `<tag>:<sha256 of the JSON-encoded messages>`.
pub fn cassette_key(request: &ChatRequest) -> String {
    let bytes = serde_json::to_vec(&request.messages).expect("messages serialize");
    format!("{}:{}", request.tag, hex::encode(Sha256::digest(&bytes)))
}

/// Reads a cassette. The first entry for a key wins.
pub fn load_cassette(path: &Path) -> Result<HashMap<String, String>, LlmError> {
    let file = File::open(path).map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CassetteEntry = serde_json::from_str(&line)
            .map_err(|e| LlmError::Io(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.entry(entry.key).or_insert(entry.response);
    }
    Ok(out)
}

/// Forwards to an inner backend and appends every successful exchange.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    out: Mutex<File>,
}

impl RecordingBackend {
    /// Appends to `path`, creating it if needed.
    pub fn new(inner: Arc<dyn ChatBackend>, path: &Path) -> Result<Self, LlmError> {
        let out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self { inner, out: Mutex::new(out) })
    }
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let response = self.inner.complete(request)?;
        let entry = CassetteEntry { key: cassette_key(request), request: request.clone(), response: response.clone(), timestamp: Utc::now() };
        let mut line = serde_json::to_string(&entry).map_err(|e| LlmError::Io(e.to_string()))?;
        line.push('\n');
        self.out.lock().unwrap().write_all(line.as_bytes()).map_err(|e| LlmError::Io(e.to_string()))?;
        Ok(response)
    }
}

/// Answers only from a cassette; anything unrecorded is a miss.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    entries: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        Ok(Self { entries: load_cassette(path)? })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        Self { entries: entries.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let key = cassette_key(request);
        self.entries.get(&key).cloned().ok_or(LlmError::ReplayMiss { tag: request.tag.clone(), key })
    }
}
