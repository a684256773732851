//! Request-time orchestration: neighbor summary, per-aspect next-step
//! predictions, then the final ranked recommendation.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use chrono::Weekday;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{region_label, Aspect, AspectViews, Catalog, PoiId, SocialGraph, UserId, Vocabularies};
use crate::geo::haversine;
use crate::kb::{FineGrainedPreferences, KnowledgeBase};
use crate::llm::{Conversation, LlmClient, LlmError};
use crate::neighbors::{find_neighbors, summarize_neighbor_preferences, NeighborError, NeighborSet, Population, DEFAULT_MAX_SOCIAL};
use crate::prompting::{
    parse_recommendations, parse_single_label, render_steps, AspectHints, CandidateLine, PrefKind, PreferenceContext,
    PromptError, PromptSet, VisitLine, DEFAULT_RANKING, MAX_RECOMMENDATIONS,
};

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error("empty candidate list")]
    NoCandidates,
    #[error("current views are not aligned with the visited POIs")]
    Misaligned,
    #[error("POI index {0} outside the catalog")]
    UnknownPoi(usize),
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecommenderConfig {
    /// Aspects predicted before the final prompt. Empty sends the raw
    /// sequence straight to the final prompt.
    pub aspects: Vec<Aspect>,
    pub neighbors: bool,
    pub max_social: usize,
    pub repair_retries: usize,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        Self { aspects: Aspect::ALL.to_vec(), neighbors: true, max_social: DEFAULT_MAX_SOCIAL, repair_retries: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationRequest {
    pub user_id: UserId,
    /// Uploaded views of the current sequence.
    pub current: AspectViews,
    /// Catalog positions of the uploaded current POIs, aligned with `current`.
    pub visits: Vec<usize>,
    pub day: Weekday,
    pub hour: u8,
    /// Catalog positions.
    pub candidates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedPoi {
    pub poi_id: PoiId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub repairs: usize,
    pub dropped_labels: usize,
    /// The final answer never parsed and the distance ordering was used.
    pub fell_back: bool,
    pub neighbors: NeighborSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationResult {
    pub user_id: UserId,
    pub items: Vec<RecommendedPoi>,
    /// Candidate positions of `items`, in order.
    #[serde(skip)]
    pub positions: Vec<usize>,
    pub importance: [Aspect; 3],
    pub hints: AspectHints,
    pub diagnostics: Diagnostics,
}

/// Candidates sorted by distance from `from`, ties by catalog order.
pub fn rank_by_distance(catalog: &Catalog, from: usize, candidates: &[usize]) -> Vec<usize> {
    let origin = catalog.poi(from).location();
    let mut out = candidates.to_vec();
    out.sort_by(|&a, &b| {
        haversine(origin, catalog.poi(a).location()).total_cmp(&haversine(origin, catalog.poi(b).location())).then(a.cmp(&b))
    });
    out
}

/// What neighbor retrieval reads: uploaded distributions, the flipped
/// graph, and who has stored preferences.
#[derive(Clone, Copy)]
pub struct NeighborSources<'a> {
    pub population: &'a Population,
    pub graph: &'a SocialGraph,
    pub participants: &'a BTreeSet<UserId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborSummary {
    pub neighbors: NeighborSet,
    pub preferences: FineGrainedPreferences,
}

pub struct Recommender<'a> {
    pub catalog: &'a Catalog,
    pub vocab: &'a Vocabularies,
    pub kb: &'a KnowledgeBase,
    pub sources: NeighborSources<'a>,
    pub client: &'a LlmClient,
    pub prompts: &'a PromptSet,
    pub config: RecommenderConfig,
    summaries: Mutex<HashMap<UserId, Arc<NeighborSummary>>>,
}

impl<'a> Recommender<'a> {
    pub fn new(
        catalog: &'a Catalog,
        vocab: &'a Vocabularies,
        kb: &'a KnowledgeBase,
        sources: NeighborSources<'a>,
        client: &'a LlmClient,
        prompts: &'a PromptSet,
        config: RecommenderConfig,
    ) -> Self {
        Self { catalog, vocab, kb, sources, client, prompts, config, summaries: Mutex::default() }
    }

    /// Neighbors and their summarized preferences; computed once per user.
    pub fn neighbor_summary(&self, user: &UserId) -> Result<Arc<NeighborSummary>, RecommendError> {
        if let Some(s) = self.summaries.lock().unwrap().get(user) {
            return Ok(s.clone());
        }
        let s = &self.sources;
        let neighbors = find_neighbors(user, s.population, s.graph, s.participants, self.config.max_social)?;
        let preferences =
            summarize_neighbor_preferences(&neighbors, self.kb, self.client, self.prompts, self.config.repair_retries)?;
        let summary = Arc::new(NeighborSummary { neighbors, preferences });
        Ok(self.summaries.lock().unwrap().entry(user.clone()).or_insert(summary).clone())
    }

    fn preference_context(&self, aspect: Aspect, own: &FineGrainedPreferences, summary: Option<&NeighborSummary>) -> PreferenceContext {
        let kinds: Vec<PrefKind> = PrefKind::ALL.into_iter().filter(|k| k.aspect() == aspect).collect();
        PreferenceContext {
            own: kinds.iter().map(|&k| (k, own.render(k))).collect(),
            neighbors: summary.map(|s| kinds.iter().map(|&k| (k, s.preferences.render(k))).collect()),
        }
    }

    fn candidate_line(&self, idx: usize, origin: Option<usize>) -> CandidateLine {
        let p = self.catalog.poi(idx);
        CandidateLine {
            poi: p.poi_id.0.clone(),
            category: self.catalog.category_name(p.category_id).to_string(),
            region: region_label(p.region_id),
            distance_km: origin.map(|o| haversine(self.catalog.poi(o).location(), p.location())),
        }
    }

    pub fn recommend(&self, req: &RecommendationRequest) -> Result<RecommendationResult, RecommendError> {
        if req.candidates.is_empty() {
            return Err(RecommendError::NoCandidates);
        }
        if Aspect::ALL.iter().any(|&a| req.current.get(a).len() != req.visits.len()) {
            return Err(RecommendError::Misaligned);
        }
        if let Some(&bad) = req.visits.iter().chain(&req.candidates).find(|&&i| i >= self.catalog.len()) {
            return Err(RecommendError::UnknownPoi(bad));
        }
        let summary = if self.config.neighbors { Some(self.neighbor_summary(&req.user_id)?) } else { None };
        let own = self.kb.get(&req.user_id).unwrap_or_default();
        let mut diagnostics = Diagnostics {
            neighbors: summary.as_ref().map(|s| s.neighbors.clone()).unwrap_or_default(),
            ..Default::default()
        };

        let ids: Vec<String> = req.candidates.iter().map(|&i| self.catalog.poi(i).poi_id.0.clone()).collect();
        let mut conv = Conversation::new(self.prompts.task_instruction(&ids.join(", "))?);
        let retries = self.config.repair_retries;

        let mut hints = AspectHints::default();
        for aspect in Aspect::ALL.into_iter().filter(|a| self.config.aspects.contains(a)) {
            let ctx = self.preference_context(aspect, &own, summary.as_deref());
            let seq = render_steps(req.current.get(aspect), self.vocab, aspect);
            let turn = self.prompts.next_aspect(aspect, &seq, req.day, req.hour, &ctx)?;
            let repair = self.prompts.repair(turn.format)?;
            let answer = conv.ask(self.client, &format!("P6:{}", aspect.name()), turn.text, &repair, retries, parse_single_label)?;
            diagnostics.repairs += answer.repairs;
            hints.set(aspect, answer.value.ok());
        }

        let origin = req.visits.last().copied();
        let candidates: Vec<CandidateLine> = req.candidates.iter().map(|&i| self.candidate_line(i, origin)).collect();
        let visits: Vec<VisitLine> = req
            .visits
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let c = req.current.category[k];
                VisitLine {
                    poi: self.catalog.poi(i).poi_id.0.clone(),
                    category: self.vocab.label(Aspect::Category, c.token),
                    region: self.vocab.label(Aspect::Region, req.current.region[k].token),
                    day: c.day,
                    hour: c.hour,
                }
            })
            .collect();
        let turn = self.prompts.recommend(&candidates, &visits, &hints)?;
        let repair = self.prompts.repair(turn.format)?;
        let answer = conv.ask(self.client, "P7", turn.text, &repair, retries, |t| parse_recommendations(t, &ids))?;
        diagnostics.repairs += answer.repairs;

        let (positions, reasons, importance) = match answer.value {
            Ok(parsed) => {
                diagnostics.dropped_labels = parsed.dropped;
                let (pos, why): (Vec<usize>, Vec<String>) = parsed.items.into_iter().unzip();
                (pos, why, parsed.ranking)
            }
            Err(_) => {
                diagnostics.fell_back = true;
                let ranked = match origin {
                    Some(o) => rank_by_distance(self.catalog, o, &req.candidates),
                    None => req.candidates.clone(),
                };
                let pos: Vec<usize> = ranked
                    .iter()
                    .take(MAX_RECOMMENDATIONS)
                    .map(|p| req.candidates.iter().position(|c| c == p).expect("ranked from candidates"))
                    .collect();
                let why = vec!["nearest to the last check-in".to_string(); pos.len()];
                (pos, why, DEFAULT_RANKING)
            }
        };
        let items = positions
            .iter()
            .zip(reasons)
            .map(|(&p, reason)| RecommendedPoi { poi_id: self.catalog.poi(req.candidates[p]).poi_id.clone(), reason })
            .collect();
        Ok(RecommendationResult { user_id: req.user_id.clone(), items, positions, importance, hints, diagnostics })
    }
}
