//! Tolerant parsers for model answers. Each either extracts at least one
//! item or fails with the raw text attached.

use std::sync::OnceLock;

use indexmap::IndexMap;
use regex::Regex;
use thiserror::Error;

use super::{TemporalPrefs, TransitionPrefs};
use crate::corpus::Aspect;

pub const MAX_RECOMMENDATIONS: usize = 10;

#[derive(Debug, Clone, Error, PartialEq)]
#[error("could not parse {expected} from {raw:?}")]
pub struct ParseError {
    pub expected: &'static str,
    pub raw: String,
}

fn fail(expected: &'static str, raw: &str) -> ParseError {
    ParseError { expected, raw: raw.to_string() }
}

const QUOTES: &[char] = &['"', '\'', '`', '\u{2018}', '\u{2019}', '\u{201c}', '\u{201d}', '*'];

fn clean_label(s: &str) -> &str {
    s.trim().trim_matches(|c: char| c.is_whitespace() || QUOTES.contains(&c))
}

/// Text inside the first `{...}` block, or everything when there is none.
fn first_block(text: &str) -> &str {
    match text.find('{') {
        Some(open) => {
            let inner = &text[open + 1..];
            match inner.find('}') {
                Some(close) => &inner[..close],
                None => inner,
            }
        }
        None => text,
    }
}

fn split_pair(item: &str) -> Option<(String, String)> {
    let item = clean_label(item.trim_end_matches('.'));
    let cut = |at: usize, width: usize| -> Option<(String, String)> {
        let a = clean_label(&item[..at]);
        let b = clean_label(&item[at + width..]);
        (!a.is_empty() && !b.is_empty()).then(|| (a.to_string(), b.to_string()))
    };
    for arrow in ["->", "\u{2192}"] {
        if let Some(at) = item.find(arrow) {
            return cut(at, arrow.len());
        }
    }
    if let Some(at) = item.rfind(" - ") {
        return cut(at, 3);
    }
    let hyphens: Vec<usize> = item.match_indices('-').map(|(i, _)| i).collect();
    if hyphens.len() == 1 {
        return cut(hyphens[0], 1);
    }
    // `Restaurants -Hotel`: a hyphen spaced on exactly one side.
    let bytes = item.as_bytes();
    let one_sided: Vec<usize> = hyphens
        .into_iter()
        .filter(|&i| {
            let before = i > 0 && bytes[i - 1] == b' ';
            let after = i + 1 < bytes.len() && bytes[i + 1] == b' ';
            before != after
        })
        .collect();
    if one_sided.len() == 1 {
        return cut(one_sided[0], 1);
    }
    None
}

/// `{A-B, C-D}` into ordered pairs. Surrounding prose and missing braces
/// are tolerated; items that cannot be split unambiguously are skipped.
pub fn parse_pair_list(text: &str) -> Result<TransitionPrefs, ParseError> {
    let pairs: Vec<(String, String)> = first_block(text).split([',', '\n', ';']).filter_map(split_pair).collect();
    if pairs.is_empty() {
        return Err(fail("a transition list", text));
    }
    Ok(TransitionPrefs(pairs))
}

fn temporal_entry() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"([^:{}\[\],\n]+?)\s*:\s*\[([^\[\]]*)\]").unwrap())
}

/// `{Evening: [Bars, Restaurants], 6pm: [Cafe]}` into an ordered map.
/// Repeated keys are merged.
pub fn parse_temporal_map(text: &str) -> Result<TemporalPrefs, ParseError> {
    let mut map: IndexMap<String, Vec<String>> = IndexMap::new();
    for cap in temporal_entry().captures_iter(text) {
        let key = clean_label(&cap[1]);
        let values: Vec<String> =
            cap[2].split(',').map(clean_label).filter(|v| !v.is_empty()).map(str::to_string).collect();
        if key.is_empty() || values.is_empty() {
            continue;
        }
        let slot = map.entry(key.to_string()).or_default();
        for v in values {
            if !slot.contains(&v) {
                slot.push(v);
            }
        }
    }
    if map.is_empty() {
        return Err(fail("a temporal map", text));
    }
    Ok(TemporalPrefs(map))
}

const LABEL_TRIM: &[char] = &[
    '.', ',', ';', ':', '!', '?', '"', '\'', '`', '*', '{', '}', '[', ']', '(', ')', '\u{2018}', '\u{2019}', '\u{201c}',
    '\u{201d}',
];

/// First non-empty line, minus surrounding punctuation and quotes. A
/// `Label: value` line yields the value.
pub fn parse_single_label(text: &str) -> Result<String, ParseError> {
    let line = text
        .lines()
        .map(|l| l.trim_matches(|c: char| c.is_whitespace() || LABEL_TRIM.contains(&c)))
        .find(|l| !l.is_empty())
        .ok_or_else(|| fail("a label", text))?;
    let value = match line.rsplit_once(':') {
        Some((_, v)) if !clean_label(v).is_empty() => v,
        _ => line,
    };
    let value = value.trim_matches(|c: char| c.is_whitespace() || LABEL_TRIM.contains(&c));
    if value.is_empty() {
        return Err(fail("a label", text));
    }
    Ok(value.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRecommendation {
    /// `(candidate position, reason)` in answer order, deduplicated.
    pub items: Vec<(usize, String)>,
    pub ranking: [Aspect; 3],
    /// Whether the ranking came from the answer rather than the default.
    pub ranking_found: bool,
    /// Labels that matched no candidate.
    pub dropped: usize,
}

pub const DEFAULT_RANKING: [Aspect; 3] = [Aspect::Category, Aspect::Region, Aspect::Distance];

fn ranking_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\s*([A-Za-z]+)\s*,\s*([A-Za-z]+)\s*,\s*([A-Za-z]+)\s*\]").unwrap())
}

fn item_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*\u{2022}]+|\d+[.)])\s*").unwrap())
}

fn resolve(label: &str, lowered: &[String], allow_substring: bool) -> Option<usize> {
    let l = label.to_lowercase();
    if let Some(i) = lowered.iter().position(|c| *c == l) {
        return Some(i);
    }
    if !allow_substring || l.len() < 3 {
        return None;
    }
    let mut hits = lowered.iter().enumerate().filter(|(_, c)| l.contains(c.as_str()) || c.contains(&l));
    match (hits.next(), hits.next()) {
        (Some((i, _)), None) => Some(i),
        _ => None,
    }
}

/// Ranked POIs with reasons, resolved against `candidates` by label.
///
/// Entries are separated by newlines or `;`. An entry is `label: reason`;
/// a bare entry without a colon must match a candidate exactly, while a
/// labelled one may also match a unique candidate by substring. At most
/// [`MAX_RECOMMENDATIONS`] items are kept.
pub fn parse_recommendations<S: AsRef<str>>(text: &str, candidates: &[S]) -> Result<ParsedRecommendation, ParseError> {
    let mut body = text.to_string();
    let mut ranking = DEFAULT_RANKING;
    let mut ranking_found = false;
    let found = ranking_re().captures_iter(text).filter_map(|cap| {
        let parsed: Vec<Aspect> = (1..=3).filter_map(|i| Aspect::parse(&cap[i])).collect();
        let is_perm = parsed.len() == 3 && Aspect::ALL.iter().all(|a| parsed.contains(a));
        is_perm.then(|| (cap.get(0).unwrap().range(), [parsed[0], parsed[1], parsed[2]]))
    });
    if let Some((range, r)) = found.last() {
        ranking = r;
        ranking_found = true;
        body.replace_range(range, "");
    }

    let lowered: Vec<String> = candidates.iter().map(|c| c.as_ref().trim().to_lowercase()).collect();
    let mut items: Vec<(usize, String)> = Vec::new();
    let mut dropped = 0;
    for chunk in body.split(['\n', ';']) {
        let chunk = chunk.replace(['{', '}'], "");
        let chunk = item_marker().replace(&chunk, "");
        let chunk = chunk.trim().trim_end_matches('.').trim();
        if chunk.is_empty() || chunk.chars().all(|c| LABEL_TRIM.contains(&c) || c.is_whitespace()) {
            continue;
        }
        let (label, reason, labelled) = match chunk.split_once(':') {
            Some((l, r)) => (clean_label(l), r.trim(), true),
            None => (clean_label(chunk), "", false),
        };
        if label.is_empty() {
            continue;
        }
        match resolve(label, &lowered, labelled) {
            Some(i) if !items.iter().any(|(j, _)| *j == i) => items.push((i, reason.to_string())),
            Some(_) => {}
            None => dropped += 1,
        }
    }
    items.truncate(MAX_RECOMMENDATIONS);
    if items.is_empty() {
        return Err(fail("recommended POIs", text));
    }
    Ok(ParsedRecommendation { items, ranking, ranking_found, dropped })
}
