//! Preference extraction: probe each aspect over the current sequence, then
//! refine by predicting and revealing the last step of sampled segments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Aspect, AspectViews, Step, UserId, Vocabularies};
use crate::kb::{ExtractionMeta, FineGrainedPreferences};
use crate::llm::{Conversation, LlmClient, LlmError};
use crate::neighbors::ALL_POIS;
use crate::prompting::{
    parse_pair_list, parse_single_label, parse_temporal_map, render_steps, OutputFormat, PromptError, PromptSet, Turn,
};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("invalid extraction config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectionSources {
    pub recent: bool,
    pub history: bool,
}

impl Default for ReflectionSources {
    fn default() -> Self {
        Self { recent: true, history: true }
    }
}

impl ReflectionSources {
    pub fn none() -> Self {
        Self { recent: false, history: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Segments per source.
    pub m: usize,
    /// Maximum segment length.
    pub n: usize,
    /// Aspects to probe; empty disables extraction altogether.
    pub aspects: Vec<Aspect>,
    pub reflection: ReflectionSources,
    pub repair_retries: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { m: 1, n: 5, aspects: Aspect::ALL.to_vec(), reflection: ReflectionSources::default(), repair_retries: 1 }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.m < 1 {
            return Err(ExtractionError::Config("m must be at least 1".into()));
        }
        if self.n < 2 {
            return Err(ExtractionError::Config("n must be at least 2".into()));
        }
        Ok(())
    }

    pub fn enabled(&self, aspect: Aspect) -> bool {
        self.aspects.contains(&aspect)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentSource {
    Recent,
    History,
}

/// A window of one view. The last step is held out during reflection.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub source: SegmentSource,
    /// Index into the history; `None` for the current sequence.
    pub sequence: Option<usize>,
    pub start: usize,
    pub steps: Vec<Step>,
}

impl Segment {
    pub fn prefix(&self) -> &[Step] {
        &self.steps[..self.steps.len() - 1]
    }

    pub fn held_out(&self) -> &Step {
        self.steps.last().expect("segments have at least two steps")
    }
}

/// The `m` rightmost non-overlapping windows of length `n` (the oldest may
/// be shorter), oldest first. Windows shorter than two steps are dropped.
pub fn sample_recent_segments(current: &[Step], m: usize, n: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut end = current.len();
    while out.len() < m && end >= 2 && n >= 2 {
        let start = end.saturating_sub(n);
        out.push(Segment { source: SegmentSource::Recent, sequence: None, start, steps: current[start..end].to_vec() });
        end = start;
    }
    out.reverse();
    out
}

/// Up to `m` history windows ranked by context relevance: windows whose
/// second-last token equals the current sequence's last token come first,
/// then those matching the one before it, and so on. Within a tier, later
/// windows win.
pub fn sample_contextual_segments(history: &[Vec<Step>], current: &[Step], m: usize, n: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    if n < 2 {
        return out;
    }
    let mut used_anchors = Vec::new();
    for anchor in current.iter().rev().map(|s| s.token) {
        if out.len() >= m {
            break;
        }
        if used_anchors.contains(&anchor) {
            continue;
        }
        used_anchors.push(anchor);
        for (si, seq) in history.iter().enumerate().rev() {
            for j in (0..seq.len().saturating_sub(1)).rev() {
                if out.len() >= m {
                    return out;
                }
                if seq[j].token == anchor {
                    let start = (j + 2).saturating_sub(n);
                    out.push(Segment {
                        source: SegmentSource::History,
                        sequence: Some(si),
                        start,
                        steps: seq[start..j + 2].to_vec(),
                    });
                }
            }
        }
    }
    out
}

/// What one user uploads for extraction: perturbed views of the training
/// history and of the current sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionInput {
    pub user_id: UserId,
    pub history: Vec<AspectViews>,
    pub current: AspectViews,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionOutcome {
    pub preferences: FineGrainedPreferences,
    /// Answers that stayed unparseable after repair.
    pub parse_failures: usize,
    pub segments: usize,
}

fn apply(prefs: &mut FineGrainedPreferences, aspect: Aspect, turn: &Turn, answer: &str) -> bool {
    match turn.format {
        OutputFormat::PairList(_) => match (parse_pair_list(answer), prefs.transition_mut(aspect)) {
            (Ok(v), Some(slot)) => {
                *slot = v;
                true
            }
            _ => false,
        },
        OutputFormat::TemporalMap(_) => match parse_temporal_map(answer) {
            Ok(v) => {
                *prefs.temporal_mut(aspect) = v;
                true
            }
            Err(_) => false,
        },
        _ => false,
    }
}

fn kind_word(turn: &Turn) -> &'static str {
    match turn.format {
        OutputFormat::PairList(_) => "transition",
        _ => "temporal",
    }
}

struct Dialogue<'a> {
    conv: Conversation,
    client: &'a LlmClient,
    prompts: &'a PromptSet,
    retries: usize,
    failures: usize,
}

impl Dialogue<'_> {
    /// Sends a preference turn and replaces the stored structure if the
    /// answer parses.
    fn preference_turn(&mut self, prefs: &mut FineGrainedPreferences, aspect: Aspect, stage: &str, turn: Turn) -> Result<(), ExtractionError> {
        let tag = format!("{stage}:{}:{}", aspect.name(), kind_word(&turn));
        let repair = self.prompts.repair(turn.format)?;
        let format = turn.format;
        let check = move |t: &str| match format {
            OutputFormat::PairList(_) => parse_pair_list(t).map(|_| ()),
            _ => parse_temporal_map(t).map(|_| ()),
        };
        let answer = self.conv.ask(self.client, &tag, turn.text.clone(), &repair, self.retries, check)?;
        if answer.value.is_err() || !apply(prefs, aspect, &turn, &answer.raw) {
            self.failures += 1;
        }
        Ok(())
    }
}

/// Runs one dialogue per enabled aspect (category, region, distance order).
pub fn extract_user_preferences(
    input: &ExtractionInput,
    vocab: &Vocabularies,
    config: &ExtractionConfig,
    client: &LlmClient,
    prompts: &PromptSet,
) -> Result<ExtractionOutcome, ExtractionError> {
    config.validate()?;
    let mut outcome = ExtractionOutcome::default();
    let system = prompts.task_instruction(ALL_POIS)?;
    for aspect in Aspect::ALL.into_iter().filter(|a| config.enabled(*a)) {
        let current = input.current.get(aspect);
        let mut d = Dialogue { conv: Conversation::new(system.clone()), client, prompts, retries: config.repair_retries, failures: 0 };
        let prefs = &mut outcome.preferences;
        for turn in prompts.probe_turns(aspect, &render_steps(current, vocab, aspect))? {
            d.preference_turn(prefs, aspect, "P2", turn)?;
        }
        let mut segments = Vec::new();
        if config.reflection.recent {
            segments.extend(sample_recent_segments(current, config.m, config.n));
        }
        if config.reflection.history {
            let history: Vec<Vec<Step>> = input.history.iter().map(|v| v.get(aspect).to_vec()).collect();
            segments.extend(sample_contextual_segments(&history, current, config.m, config.n));
        }
        outcome.segments += segments.len();
        for seg in &segments {
            let truth = seg.held_out();
            let turn = prompts.predict(aspect, &render_steps(seg.prefix(), vocab, aspect), truth.day, truth.hour)?;
            let repair = prompts.repair(turn.format)?;
            let tag = format!("P3:{}", aspect.name());
            let guess = d.conv.ask(client, &tag, turn.text, &repair, config.repair_retries, parse_single_label)?;
            if guess.value.is_err() {
                d.failures += 1;
            }
            for turn in prompts.reflect_turns(aspect, &vocab.label(aspect, truth.token))? {
                d.preference_turn(prefs, aspect, "P4", turn)?;
            }
        }
        outcome.parse_failures += d.failures;
    }
    let newest = input
        .history
        .iter()
        .chain(std::iter::once(&input.current))
        .flat_map(|v| Aspect::ALL.into_iter().flat_map(move |a| v.get(a).iter().map(|s| s.timestamp)))
        .max();
    outcome.preferences.meta = ExtractionMeta { epsilon: None, m: config.m, n: config.n, as_of: newest };
    Ok(outcome)
}
