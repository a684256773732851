//! Per-user store of extracted preferences.
//!
//! The whole store lives in memory and is persisted as one `kb.ndjson`
//! file, sorted by user id and rewritten through a temp file plus rename on
//! every write, so readers of the file never see a partial entry.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Aspect, UserId};
use crate::prompting::{PrefKind, TemporalPrefs, TransitionPrefs};

pub const KB_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Corrupt { path: String, line: usize, reason: String },
    #[error("{path}:{line}: unsupported schema version {found}")]
    Schema { path: String, line: usize, found: u32 },
}

/// How a preference record was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMeta {
    /// Budget the uploaded sequences were perturbed with; `None` when
    /// sequence perturbation was off.
    pub epsilon: Option<f64>,
    pub m: usize,
    pub n: usize,
    /// Timestamp of the newest check-in the extraction saw.
    pub as_of: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FineGrainedPreferences {
    pub categorical_transition: TransitionPrefs,
    pub categorical_temporal: TemporalPrefs,
    pub regional_transition: TransitionPrefs,
    pub regional_temporal: TemporalPrefs,
    pub distance_temporal: TemporalPrefs,
    #[serde(default)]
    pub meta: ExtractionMeta,
}

impl FineGrainedPreferences {
    pub fn transition(&self, aspect: Aspect) -> Option<&TransitionPrefs> {
        match aspect {
            Aspect::Category => Some(&self.categorical_transition),
            Aspect::Region => Some(&self.regional_transition),
            Aspect::Distance => None,
        }
    }

    pub fn transition_mut(&mut self, aspect: Aspect) -> Option<&mut TransitionPrefs> {
        match aspect {
            Aspect::Category => Some(&mut self.categorical_transition),
            Aspect::Region => Some(&mut self.regional_transition),
            Aspect::Distance => None,
        }
    }

    pub fn temporal(&self, aspect: Aspect) -> &TemporalPrefs {
        match aspect {
            Aspect::Category => &self.categorical_temporal,
            Aspect::Region => &self.regional_temporal,
            Aspect::Distance => &self.distance_temporal,
        }
    }

    pub fn temporal_mut(&mut self, aspect: Aspect) -> &mut TemporalPrefs {
        match aspect {
            Aspect::Category => &mut self.categorical_temporal,
            Aspect::Region => &mut self.regional_temporal,
            Aspect::Distance => &mut self.distance_temporal,
        }
    }

    /// Prompt text for one preference type (`none` when empty).
    pub fn render(&self, kind: PrefKind) -> String {
        if kind.is_transition() {
            self.transition(kind.aspect()).map(TransitionPrefs::to_text).unwrap_or_else(|| "none".into())
        } else {
            self.temporal(kind.aspect()).to_text()
        }
    }

    pub fn is_empty_kind(&self, kind: PrefKind) -> bool {
        if kind.is_transition() {
            self.transition(kind.aspect()).is_none_or(TransitionPrefs::is_empty)
        } else {
            self.temporal(kind.aspect()).is_empty()
        }
    }

    /// True when all five preference types are empty.
    pub fn is_empty(&self) -> bool {
        PrefKind::ALL.iter().all(|&k| self.is_empty_kind(k))
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    schema_version: u32,
    user_id: UserId,
    preferences: FineGrainedPreferences,
}

type FaultHook = Box<dyn Fn(&Path) -> std::io::Result<()> + Send + Sync>;

/// Many readers, one writer at a time.
pub struct KnowledgeBase {
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<UserId, FineGrainedPreferences>>,
    writer: Mutex<()>,
    before_rename: Option<FaultHook>,
}

impl std::fmt::Debug for KnowledgeBase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeBase").field("path", &self.path).field("len", &self.len()).finish()
    }
}

impl KnowledgeBase {
    /// A store that is never persisted.
    pub fn in_memory() -> Self {
        Self { path: None, entries: RwLock::default(), writer: Mutex::new(()), before_rename: None }
    }

    /// Loads `path` if it exists; otherwise starts empty and creates the
    /// file on the first write.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, KbError> {
        let path = path.into();
        let entries = if path.exists() { load(&path)? } else { BTreeMap::new() };
        Ok(Self { path: Some(path), entries: RwLock::new(entries), writer: Mutex::new(()), before_rename: None })
    }

    /// Runs `hook` on the temp file after it is written and synced but
    /// before it replaces the live file. An error aborts the write.
    pub fn with_fault_hook(mut self, hook: impl Fn(&Path) -> std::io::Result<()> + Send + Sync + 'static) -> Self {
        self.before_rename = Some(Box::new(hook));
        self
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, user: &UserId) -> Option<FineGrainedPreferences> {
        self.entries.read().unwrap().get(user).cloned()
    }

    pub fn contains(&self, user: &UserId) -> bool {
        self.entries.read().unwrap().contains_key(user)
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn users(&self) -> Vec<UserId> {
        self.entries.read().unwrap().keys().cloned().collect()
    }

    pub fn put(&self, user: UserId, prefs: FineGrainedPreferences) -> Result<(), KbError> {
        self.put_many(std::iter::once((user, prefs)))
    }

    /// Inserts or overwrites several entries with a single file rewrite.
    /// On error neither the file nor the in-memory view changes.
    pub fn put_many(&self, items: impl IntoIterator<Item = (UserId, FineGrainedPreferences)>) -> Result<(), KbError> {
        let _guard = self.writer.lock().unwrap();
        let mut next = self.entries.read().unwrap().clone();
        next.extend(items);
        if let Some(path) = &self.path {
            self.persist(path, &next)?;
        }
        *self.entries.write().unwrap() = next;
        Ok(())
    }

    fn persist(&self, path: &Path, entries: &BTreeMap<UserId, FineGrainedPreferences>) -> Result<(), KbError> {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |e| KbError::Io { path: p, source: e }
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
        let tmp = tmp_path(path);
        let result = (|| {
            let file = File::create(&tmp).map_err(io(&tmp))?;
            let mut w = BufWriter::new(file);
            for (user_id, preferences) in entries {
                let line = Line { schema_version: KB_SCHEMA_VERSION, user_id: user_id.clone(), preferences: preferences.clone() };
                serde_json::to_writer(&mut w, &line)
                    .map_err(|e| KbError::Io { path: tmp.display().to_string(), source: e.into() })?;
                w.write_all(b"\n").map_err(io(&tmp))?;
            }
            let file = w.into_inner().map_err(|e| KbError::Io { path: tmp.display().to_string(), source: e.into_error() })?;
            file.sync_all().map_err(io(&tmp))?;
            if let Some(hook) = &self.before_rename {
                hook(&tmp).map_err(io(&tmp))?;
            }
            fs::rename(&tmp, path).map_err(io(path))
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn load(path: &Path) -> Result<BTreeMap<UserId, FineGrainedPreferences>, KbError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| KbError::Io { path: p.clone(), source: e })?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| KbError::Io { path: p.clone(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line)
            .map_err(|e| KbError::Corrupt { path: p.clone(), line: i + 1, reason: e.to_string() })?;
        if parsed.schema_version != KB_SCHEMA_VERSION {
            return Err(KbError::Schema { path: p.clone(), line: i + 1, found: parsed.schema_version });
        }
        out.insert(parsed.user_id, parsed.preferences);
    }
    Ok(out)
}
