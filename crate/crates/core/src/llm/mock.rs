//! Offline stand-in for a real model. Reads the rendered prompts and answers
//! with simple frequency heuristics, in the requested format. Deterministic:
//! the same request always gets the same answer.

use std::collections::HashMap;
use std::sync::OnceLock;

use indexmap::IndexMap;
use regex::Regex;

use super::{ChatRequest, LlmError, Responder, Role, ScriptedBackend};
use crate::prompting::{parse_pair_list, parse_temporal_map, TemporalPrefs, TransitionPrefs};

/// Backend answering every prompt kind with [`analyst_reply`].
pub fn mock_analyst() -> ScriptedBackend {
    ScriptedBackend::new().on("", Responder::func(analyst_reply))
}

fn step_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([^()]+?), (?:[^(),]+, [^(),]+, )?(Mon|Tue|Wed|Thu|Fri|Sat|Sun), (\d{1,2}(?:am|pm))\)").unwrap())
}

fn candidate_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([^(),]+), ([^()]+?), ([^(),]+), (?:([\d.]+)km|unknown)\)").unwrap())
}

fn brace_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([^{}]*)\}").unwrap())
}

/// `(label, hour)` for each step in `text`.
fn steps(text: &str) -> Vec<(String, String)> {
    step_re().captures_iter(text).map(|c| (c[1].trim().to_string(), c[3].to_string())).collect()
}

/// Steps of the newest user message that has any.
fn latest_steps(req: &ChatRequest) -> Vec<(String, String)> {
    req.messages
        .iter()
        .rev()
        .filter(|m| m.role == Role::User)
        .map(|m| steps(&m.content))
        .find(|s| !s.is_empty())
        .unwrap_or_default()
}

fn capture<'a>(text: &'a str, pattern: &str) -> Option<&'a str> {
    let re = Regex::new(pattern).ok()?;
    re.captures(text).and_then(|c| c.get(1)).map(|m| m.as_str().trim())
}

fn revealed(req: &ChatRequest) -> Option<String> {
    let text = req.last_user();
    capture(text, r"actually visited \w+ \{([^{}]*)\}").map(str::to_string)
}

fn query_hour(req: &ChatRequest) -> Option<String> {
    req.messages
        .iter()
        .rev()
        .filter(|m| m.role == Role::User)
        .find_map(|m| capture(&m.content, r"Now is \{\w+\} at \{(\w+)\}").map(str::to_string))
}

fn pairs_of(labels: &[String]) -> TransitionPrefs {
    let mut out: Vec<(String, String)> = Vec::new();
    for w in labels.windows(2) {
        let p = (w[0].clone(), w[1].clone());
        if !out.contains(&p) {
            out.push(p);
        }
    }
    TransitionPrefs(out)
}

fn add_temporal(map: &mut IndexMap<String, Vec<String>>, hour: String, label: String) {
    let slot = map.entry(hour).or_default();
    if !slot.contains(&label) {
        slot.push(label);
    }
}

/// Most frequent label; ties go to the most recent.
fn most_frequent(labels: &[String]) -> Option<String> {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        let e = counts.entry(l).or_default();
        e.0 += 1;
        e.1 = i;
    }
    counts.into_iter().max_by_key(|(_, v)| *v).map(|(k, _)| k.to_string())
}

fn transition_answer(req: &ChatRequest) -> String {
    let s = latest_steps(req);
    let mut labels: Vec<String> = s.into_iter().map(|(l, _)| l).collect();
    labels.extend(revealed(req));
    format!("{{{}}}", or_fallback(pairs_of(&labels).to_text(), &labels))
}

fn or_fallback(text: String, labels: &[String]) -> String {
    if text != "none" {
        return text;
    }
    match labels.last() {
        Some(l) => format!("{l}-{l}"),
        None => "none".into(),
    }
}

fn temporal_answer(req: &ChatRequest) -> String {
    let mut map = IndexMap::new();
    for (label, hour) in latest_steps(req) {
        add_temporal(&mut map, hour, label);
    }
    if let (Some(truth), Some(hour)) = (revealed_anywhere(req), query_hour(req)) {
        add_temporal(&mut map, hour, truth);
    }
    format!("{{{}}}", TemporalPrefs(map).to_text())
}

/// The reveal may sit in the previous user turn (the transition reflection).
fn revealed_anywhere(req: &ChatRequest) -> Option<String> {
    let last_two = req.messages.iter().rev().filter(|m| m.role == Role::User).take(2);
    for m in last_two {
        if let Some(t) = capture(&m.content, r"actually visited \w+ \{([^{}]*)\}") {
            return Some(t.to_string());
        }
    }
    None
}

fn label_answer(req: &ChatRequest) -> String {
    let text = req.last_user();
    let labels: Vec<String> = latest_steps(req).into_iter().map(|(l, _)| l).collect();
    let Some(last) = labels.last() else {
        return "unknown".into();
    };
    // Follow a stated transition out of the last label when there is one.
    let mut nexts = Vec::new();
    for line in text.lines().filter(|l| l.contains("transition preference: {")) {
        if let Ok(p) = parse_pair_list(line) {
            nexts.extend(p.0.into_iter().filter(|(a, _)| a == last).map(|(_, b)| b));
        }
    }
    most_frequent(&nexts).or_else(|| most_frequent(&labels)).unwrap_or_default()
}

fn summary_answer(req: &ChatRequest) -> String {
    let text = req.last_user();
    let blocks: Vec<String> = brace_re().captures_iter(text).map(|c| format!("{{{}}}", &c[1])).collect();
    let blocks = &blocks[..blocks.len().min(3)];
    if req.tag.ends_with("transition") {
        let mut out = TransitionPrefs::default();
        for b in blocks {
            for p in parse_pair_list(b).map(|p| p.0).unwrap_or_default() {
                if !out.0.contains(&p) {
                    out.0.push(p);
                }
            }
        }
        format!("{{{}}}", out.to_text())
    } else {
        let mut map = IndexMap::new();
        for b in blocks {
            for (k, vs) in parse_temporal_map(b).map(|t| t.0).unwrap_or_default() {
                for v in vs {
                    add_temporal(&mut map, k.clone(), v);
                }
            }
        }
        format!("{{{}}}", TemporalPrefs(map).to_text())
    }
}

fn bin_contains(label: &str, km: f64) -> bool {
    let body = label.trim().trim_end_matches("km");
    if let Some(hi) = body.strip_prefix('<') {
        return hi.parse::<f64>().is_ok_and(|h| km < h);
    }
    if let Some(lo) = body.strip_prefix('>') {
        return lo.parse::<f64>().is_ok_and(|l| km >= l);
    }
    match body.split_once('-') {
        Some((lo, hi)) => match (lo.parse::<f64>(), hi.parse::<f64>()) {
            (Ok(l), Ok(h)) => km >= l && km < h,
            _ => false,
        },
        None => false,
    }
}

/// Ranks candidates by hint matches, then distance, and names the top ten.
fn recommend_answer(req: &ChatRequest) -> String {
    let text = req.last_user();
    let first = text.lines().next().unwrap_or("");
    let hint = |name: &str| capture(text, &format!(r"visiting (?:.*?){name} \{{([^{{}}]*)\}}")).map(str::to_string);
    let (cat, region, dist) = (hint("category"), hint("region"), hint("distance"));
    let mut cands: Vec<(usize, String, bool, bool, bool, f64)> = candidate_re()
        .captures_iter(first)
        .enumerate()
        .map(|(i, c)| {
            let km = c.get(4).and_then(|m| m.as_str().parse().ok()).unwrap_or(f64::INFINITY);
            let cm = cat.as_deref().is_some_and(|h| h.eq_ignore_ascii_case(c[2].trim()));
            let rm = region.as_deref().is_some_and(|h| h.eq_ignore_ascii_case(c[3].trim()));
            let dm = dist.as_deref().is_some_and(|h| bin_contains(h, km));
            (i, c[1].trim().to_string(), cm, rm, dm, km)
        })
        .collect();
    cands.sort_by(|a, b| {
        (!a.2, !a.3, !a.4).cmp(&(!b.2, !b.3, !b.4)).then(a.5.total_cmp(&b.5)).then(a.0.cmp(&b.0))
    });
    let mut out = String::from("{");
    for (_, name, cm, rm, _, km) in cands.iter().take(10) {
        let why = match (cm, rm) {
            (true, true) => "matches the likely category and region",
            (true, false) => "matches the likely category",
            (false, true) => "in the likely region",
            _ => "close to the current location",
        };
        let d = if km.is_finite() { format!(", {km:.1}km away") } else { String::new() };
        out.push_str(&format!("{name}: {why}{d};\n"));
    }
    out.push_str("[category, region, distance]}");
    out
}

/// Answers one request by its tag.
pub fn analyst_reply(req: &ChatRequest) -> Result<String, LlmError> {
    let tag = req.tag.trim_end_matches(":repair");
    let kind = tag.split(':').next().unwrap_or("");
    Ok(match kind {
        "P2" | "P4" if tag.ends_with("transition") => transition_answer(req),
        "P2" | "P4" => temporal_answer(req),
        "P3" | "P6" => label_answer(req),
        "P5" => summary_answer(req),
        "P7" => recommend_answer(req),
        _ => return Err(LlmError::Api { status: 404, body: format!("mock has no answer for {}", req.tag) }),
    })
}
