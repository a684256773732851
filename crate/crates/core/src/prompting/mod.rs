//! Prompt templates, their rendering, and parsers for the answer formats
//! the templates ask for.
//!
//! Template bodies live in `prompts/*.txt` and use `${name}` placeholders.
//! The built-in set is compiled in; a directory can override any subset.

mod parse;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::Weekday;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Aspect, Step, Vocabularies};

pub use parse::{
    parse_pair_list, parse_recommendations, parse_single_label, parse_temporal_map, ParseError, ParsedRecommendation,
    DEFAULT_RANKING, MAX_RECOMMENDATIONS,
};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template} has no binding for ${{{name}}}")]
    MissingBinding { template: &'static str, name: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateId {
    TaskInstruction,
    ProbeTransition,
    ProbeTemporal,
    Predict,
    Reveal,
    ReflectTransition,
    ReflectTemporal,
    Summarize,
    PreferenceLine,
    NextAspect,
    Recommend,
    Repair,
}

impl TemplateId {
    pub const ALL: [TemplateId; 12] = [
        TemplateId::TaskInstruction,
        TemplateId::ProbeTransition,
        TemplateId::ProbeTemporal,
        TemplateId::Predict,
        TemplateId::Reveal,
        TemplateId::ReflectTransition,
        TemplateId::ReflectTemporal,
        TemplateId::Summarize,
        TemplateId::PreferenceLine,
        TemplateId::NextAspect,
        TemplateId::Recommend,
        TemplateId::Repair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::TaskInstruction => "task_instruction",
            TemplateId::ProbeTransition => "probe_transition",
            TemplateId::ProbeTemporal => "probe_temporal",
            TemplateId::Predict => "predict",
            TemplateId::Reveal => "reveal",
            TemplateId::ReflectTransition => "reflect_transition",
            TemplateId::ReflectTemporal => "reflect_temporal",
            TemplateId::Summarize => "summarize",
            TemplateId::PreferenceLine => "preference_line",
            TemplateId::NextAspect => "next_aspect",
            TemplateId::Recommend => "recommend",
            TemplateId::Repair => "repair",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateId::TaskInstruction => include_str!("../../prompts/task_instruction.txt"),
            TemplateId::ProbeTransition => include_str!("../../prompts/probe_transition.txt"),
            TemplateId::ProbeTemporal => include_str!("../../prompts/probe_temporal.txt"),
            TemplateId::Predict => include_str!("../../prompts/predict.txt"),
            TemplateId::Reveal => include_str!("../../prompts/reveal.txt"),
            TemplateId::ReflectTransition => include_str!("../../prompts/reflect_transition.txt"),
            TemplateId::ReflectTemporal => include_str!("../../prompts/reflect_temporal.txt"),
            TemplateId::Summarize => include_str!("../../prompts/summarize.txt"),
            TemplateId::PreferenceLine => include_str!("../../prompts/preference_line.txt"),
            TemplateId::NextAspect => include_str!("../../prompts/next_aspect.txt"),
            TemplateId::Recommend => include_str!("../../prompts/recommend.txt"),
            TemplateId::Repair => include_str!("../../prompts/repair.txt"),
        }
    }
}

/// Substitutes `${name}` placeholders. Values are inserted verbatim and are
/// never re-scanned, so a value containing `${x}` stays literal.
pub fn substitute(template: &'static str, body: &str, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(body.len() + 64);
    let mut rest = body;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            out.push_str(&rest[start..]);
            return Ok(out);
        };
        let name = &after[..end];
        let value = bindings
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| PromptError::MissingBinding { template, name: name.to_string() })?;
        out.push_str(value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Placeholder names used by a template body, in order of first use.
pub fn placeholders(body: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("${") {
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else { break };
        let name = after[..end].to_string();
        if !out.contains(&name) {
            out.push(name);
        }
        rest = &after[end + 1..];
    }
    out
}

/// The full set of template bodies.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    bodies: BTreeMap<TemplateId, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        let bodies = TemplateId::ALL.iter().map(|&id| (id, trim_final_newline(id.builtin()).to_string())).collect();
        Self { bodies }
    }

    /// Built-in bodies, replaced by `<dir>/<name>.txt` wherever such a file
    /// exists.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.name()));
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| PromptError::Io { path: path.display().to_string(), source: e })?;
                set.bodies.insert(id, trim_final_newline(&text).to_string());
            }
        }
        Ok(set)
    }

    pub fn body(&self, id: TemplateId) -> &str {
        &self.bodies[&id]
    }

    pub fn render(&self, id: TemplateId, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        substitute(id.name(), self.body(id), bindings)
    }
}

fn trim_final_newline(s: &str) -> &str {
    s.strip_suffix("\r\n").or_else(|| s.strip_suffix('\n')).unwrap_or(s)
}

/// Wording for one aspect inside the templates.
struct Words {
    noun: &'static str,
    title: &'static str,
    adj: &'static str,
    plural: &'static str,
}

fn words(aspect: Aspect) -> Words {
    match aspect {
        Aspect::Category => Words { noun: "category", title: "Category", adj: "categorical", plural: "categories" },
        Aspect::Region => Words { noun: "region", title: "Region", adj: "regional", plural: "regions" },
        Aspect::Distance => Words { noun: "distance", title: "Distance", adj: "distance", plural: "distances" },
    }
}

/// Distance preferences have no transition component.
pub fn has_transition(aspect: Aspect) -> bool {
    aspect != Aspect::Distance
}

fn preference_names(aspect: Aspect) -> String {
    let adj = words(aspect).adj;
    if has_transition(aspect) {
        format!("{adj} transition preference and {adj} temporal preference")
    } else {
        format!("{adj} temporal preference")
    }
}

/// The five stored preference types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefKind {
    CategoricalTransition,
    CategoricalTemporal,
    RegionalTransition,
    RegionalTemporal,
    DistanceTemporal,
}

impl PrefKind {
    pub const ALL: [PrefKind; 5] = [
        PrefKind::CategoricalTransition,
        PrefKind::CategoricalTemporal,
        PrefKind::RegionalTransition,
        PrefKind::RegionalTemporal,
        PrefKind::DistanceTemporal,
    ];

    pub fn aspect(self) -> Aspect {
        match self {
            PrefKind::CategoricalTransition | PrefKind::CategoricalTemporal => Aspect::Category,
            PrefKind::RegionalTransition | PrefKind::RegionalTemporal => Aspect::Region,
            PrefKind::DistanceTemporal => Aspect::Distance,
        }
    }

    pub fn is_transition(self) -> bool {
        matches!(self, PrefKind::CategoricalTransition | PrefKind::RegionalTransition)
    }

    pub fn of(aspect: Aspect, transition: bool) -> Option<PrefKind> {
        Self::ALL.into_iter().find(|k| k.aspect() == aspect && k.is_transition() == transition)
    }

    /// e.g. `categorical transition`.
    pub fn phrase(self) -> String {
        let kind = if self.is_transition() { "transition" } else { "temporal" };
        format!("{} {kind}", words(self.aspect()).adj)
    }

    pub fn tag(self) -> &'static str {
        match self {
            PrefKind::CategoricalTransition => "categorical_transition",
            PrefKind::CategoricalTemporal => "categorical_temporal",
            PrefKind::RegionalTransition => "regional_transition",
            PrefKind::RegionalTemporal => "regional_temporal",
            PrefKind::DistanceTemporal => "distance_temporal",
        }
    }

    pub fn format(self) -> OutputFormat {
        if self.is_transition() {
            OutputFormat::PairList(self.aspect())
        } else {
            OutputFormat::TemporalMap(self.aspect())
        }
    }
}

/// The answer shape a prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    PairList(Aspect),
    TemporalMap(Aspect),
    SingleLabel(Aspect),
    Recommendations,
}

impl OutputFormat {
    /// The format string as it appears inside the prompts.
    pub fn hint(self) -> String {
        match self {
            OutputFormat::PairList(a) => {
                let n = words(a).noun;
                format!("{{{n}-{n},...}}")
            }
            OutputFormat::TemporalMap(a) => format!("{{time: [{}]}}", words(a).plural),
            OutputFormat::SingleLabel(a) => words(a).noun.to_string(),
            OutputFormat::Recommendations => "{POI: reason; [importance ranking]}".to_string(),
        }
    }
}

/// Ordered `(from, to)` transitions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransitionPrefs(pub Vec<(String, String)>);

impl TransitionPrefs {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, from: &str, to: &str) -> bool {
        self.0.iter().any(|(a, b)| a == from && b == to)
    }

    /// `A-B, C-D`, or `none` when empty.
    pub fn to_text(&self) -> String {
        if self.0.is_empty() {
            return "none".into();
        }
        self.0.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>().join(", ")
    }
}

/// Time token (day, hour, or daypart) to labels, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemporalPrefs(pub IndexMap<String, Vec<String>>);

impl TemporalPrefs {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `Evening: [Bars, Restaurants], 6pm: [Cafe]`, or `none` when empty.
    pub fn to_text(&self) -> String {
        if self.0.is_empty() {
            return "none".into();
        }
        self.0.iter().map(|(k, v)| format!("{k}: [{}]", v.join(", "))).collect::<Vec<_>>().join(", ")
    }
}

/// `12am`, `1am`, ..., `12pm`, `1pm`, ...
pub fn hour_label(hour: u8) -> String {
    match hour % 24 {
        0 => "12am".into(),
        h @ 1..=11 => format!("{h}am"),
        12 => "12pm".into(),
        h => format!("{}pm", h - 12),
    }
}

pub fn day_label(day: Weekday) -> String {
    day.to_string()
}

/// `(label, Mon, 8am), (label, Mon, 9am)` for one aspect view.
pub fn render_steps(steps: &[Step], vocab: &Vocabularies, aspect: Aspect) -> String {
    steps
        .iter()
        .map(|s| format!("({}, {}, {})", vocab.label(aspect, s.token), day_label(s.day), hour_label(s.hour)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One visited POI in the final recommendation prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitLine {
    pub poi: String,
    pub category: String,
    pub region: String,
    pub day: Weekday,
    pub hour: u8,
}

impl fmt::Display for VisitLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.poi, self.category, self.region, day_label(self.day), hour_label(self.hour))
    }
}

/// One candidate in the final recommendation prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateLine {
    pub poi: String,
    pub category: String,
    pub region: String,
    pub distance_km: Option<f64>,
}

impl fmt::Display for CandidateLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.distance_km {
            Some(d) => write!(f, "({}, {}, {}, {:.1}km)", self.poi, self.category, self.region, d),
            None => write!(f, "({}, {}, {}, unknown)", self.poi, self.category, self.region),
        }
    }
}

fn join_display<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Hints from the per-aspect predictions; absent ones are left out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AspectHints {
    pub category: Option<String>,
    pub region: Option<String>,
    pub distance: Option<String>,
}

impl AspectHints {
    pub fn get(&self, aspect: Aspect) -> Option<&str> {
        match aspect {
            Aspect::Category => self.category.as_deref(),
            Aspect::Region => self.region.as_deref(),
            Aspect::Distance => self.distance.as_deref(),
        }
    }

    pub fn set(&mut self, aspect: Aspect, value: Option<String>) {
        match aspect {
            Aspect::Category => self.category = value,
            Aspect::Region => self.region = value,
            Aspect::Distance => self.distance = value,
        }
    }

    fn clause(&self) -> String {
        let parts: Vec<String> = Aspect::ALL
            .iter()
            .filter_map(|&a| self.get(a).map(|v| format!("{} {{{v}}}", a.name())))
            .collect();
        match parts.len() {
            0 => String::new(),
            1 => format!(", considering his next likely visiting {}", parts[0]),
            n => format!(", considering his next likely visiting {}, and {}", parts[..n - 1].join(", "), parts[n - 1]),
        }
    }
}

/// A user turn together with the format its answer should follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub text: String,
    pub format: OutputFormat,
}

/// Own and neighbor preference texts for one aspect, shown before the
/// next-aspect question.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreferenceContext {
    /// `(kind, rendered value)` for the user.
    pub own: Vec<(PrefKind, String)>,
    /// `None` when neighbor retrieval is switched off.
    pub neighbors: Option<Vec<(PrefKind, String)>>,
}

impl PromptSet {
    /// The system message. `candidates` is the rendered candidate list.
    pub fn task_instruction(&self, candidates: &str) -> Result<String, PromptError> {
        self.render(TemplateId::TaskInstruction, &[("candidates", candidates)])
    }

    /// One or two probing turns for an aspect over the user's current
    /// sequence: transition then temporal, or temporal only for distance.
    pub fn probe_turns(&self, aspect: Aspect, sequence: &str) -> Result<Vec<Turn>, PromptError> {
        let w = words(aspect);
        let mut turns = Vec::new();
        let lead = if has_transition(aspect) {
            let text = self.render(
                TemplateId::ProbeTransition,
                &[("Aspect", w.title), ("aspect", w.noun), ("adj", w.adj), ("sequence", sequence)],
            )?;
            turns.push(Turn { text, format: OutputFormat::PairList(aspect) });
            "What".to_string()
        } else {
            format!("Given the user's {} sequence: {{{sequence}}}, what", w.title)
        };
        let text = self.render(TemplateId::ProbeTemporal, &[("lead", &lead), ("adj", w.adj), ("plural", w.plural)])?;
        turns.push(Turn { text, format: OutputFormat::TemporalMap(aspect) });
        Ok(turns)
    }

    /// Asks for the held-out last element of a segment.
    pub fn predict(&self, aspect: Aspect, sequence: &str, day: Weekday, hour: u8) -> Result<Turn, PromptError> {
        let w = words(aspect);
        let text = self.render(
            TemplateId::Predict,
            &[
                ("plural", w.plural),
                ("sequence", sequence),
                ("day", &day_label(day)),
                ("hour", &hour_label(hour)),
                ("preference_names", &preference_names(aspect)),
                ("Aspect", w.title),
            ],
        )?;
        Ok(Turn { text, format: OutputFormat::SingleLabel(aspect) })
    }

    /// Reveals the true last element and asks for updated preferences.
    pub fn reflect_turns(&self, aspect: Aspect, truth: &str) -> Result<Vec<Turn>, PromptError> {
        let w = words(aspect);
        let reveal = self.render(TemplateId::Reveal, &[("aspect", w.noun), ("truth", truth)])?;
        let mut turns = Vec::new();
        let lead = if has_transition(aspect) {
            let text =
                self.render(TemplateId::ReflectTransition, &[("reveal", &reveal), ("aspect", w.noun), ("adj", w.adj)])?;
            turns.push(Turn { text, format: OutputFormat::PairList(aspect) });
            "What".to_string()
        } else {
            format!("{reveal}\nBased on the actual visited {}, what", w.noun)
        };
        let text = self.render(TemplateId::ReflectTemporal, &[("lead", &lead), ("adj", w.adj), ("plural", w.plural)])?;
        turns.push(Turn { text, format: OutputFormat::TemporalMap(aspect) });
        Ok(turns)
    }

    /// Neighbor summarization for one preference type. Each argument is the
    /// rendered preference text of that neighbor kind, or `none`.
    pub fn summarize(&self, kind: PrefKind, geographical: &str, semantic: &str, social: &str) -> Result<Turn, PromptError> {
        let format = kind.format();
        let text = self.render(
            TemplateId::Summarize,
            &[
                ("preference", &kind.phrase()),
                ("geographical", geographical),
                ("semantic", semantic),
                ("social", social),
                ("format", &format.hint()),
            ],
        )?;
        Ok(Turn { text, format })
    }

    pub fn next_aspect(
        &self,
        aspect: Aspect,
        sequence: &str,
        day: Weekday,
        hour: u8,
        prefs: &PreferenceContext,
    ) -> Result<Turn, PromptError> {
        let mut block = String::new();
        for (kind, value) in &prefs.own {
            block.push_str(&self.render(
                TemplateId::PreferenceLine,
                &[("owner", "His own"), ("preference", &kind.phrase()), ("value", value)],
            )?);
            block.push('\n');
        }
        if let Some(neighbors) = &prefs.neighbors {
            for (kind, value) in neighbors {
                block.push_str(&self.render(
                    TemplateId::PreferenceLine,
                    &[("owner", "His neighbors'"), ("preference", &kind.phrase()), ("value", value)],
                )?);
                block.push('\n');
            }
        }
        let names = preference_names(aspect);
        let neighbor_clause = if prefs.neighbors.is_some() { format!(", and his neighbors' {names}") } else { String::new() };
        let text = self.render(
            TemplateId::NextAspect,
            &[
                ("preferences", &block),
                ("day", &day_label(day)),
                ("hour", &hour_label(hour)),
                ("aspect", words(aspect).noun),
                ("sequence", sequence),
                ("preference_names", &names),
                ("neighbor_clause", &neighbor_clause),
            ],
        )?;
        Ok(Turn { text, format: OutputFormat::SingleLabel(aspect) })
    }

    pub fn recommend(&self, candidates: &[CandidateLine], sequence: &[VisitLine], hints: &AspectHints) -> Result<Turn, PromptError> {
        let text = self.render(
            TemplateId::Recommend,
            &[("candidates", &join_display(candidates)), ("sequence", &join_display(sequence)), ("hints", &hints.clause())],
        )?;
        Ok(Turn { text, format: OutputFormat::Recommendations })
    }

    pub fn repair(&self, format: OutputFormat) -> Result<String, PromptError> {
        self.render(TemplateId::Repair, &[("format", &format.hint())])
    }
}
