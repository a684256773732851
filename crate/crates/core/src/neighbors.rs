//! Neighbor retrieval: check-in distributions, KL distances, nearest
//! geographical/semantic/social neighbors, and summarizing their stored
//! preferences through the model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SocialGraph, UserId};
use crate::kb::{FineGrainedPreferences, KnowledgeBase};
use crate::llm::{Conversation, LlmClient, LlmError};
use crate::prompting::{parse_pair_list, parse_temporal_map, PrefKind, PromptError, PromptSet};

pub const DEFAULT_SMOOTHING: f64 = 1e-6;
/// Social neighbors passed to summarization, lowest ids first.
pub const DEFAULT_MAX_SOCIAL: usize = 3;
/// Candidate text for the system preamble outside a recommendation.
pub const ALL_POIS: &str = "all POIs in the city";

#[derive(Debug, Error)]
pub enum NeighborError {
    #[error("empty vocabulary")]
    EmptyVocabulary,
    #[error("token {token} outside vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },
    #[error("distribution lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no candidate neighbors for {0}")]
    NoCandidates(String),
    #[error("no distribution for user {0}")]
    UnknownUser(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Smoothed probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckinDistribution(Vec<f64>);

impl CheckinDistribution {
    /// Frequencies of `tokens` plus `alpha` per entry, renormalized. An empty
    /// token list gives the uniform distribution.
    pub fn from_tokens(tokens: impl IntoIterator<Item = u32>, size: usize, alpha: f64) -> Result<Self, NeighborError> {
        if size == 0 {
            return Err(NeighborError::EmptyVocabulary);
        }
        let mut counts = vec![0.0; size];
        for t in tokens {
            *counts.get_mut(t as usize).ok_or(NeighborError::TokenOutOfRange { token: t, size })? += 1.0;
        }
        if counts.iter().all(|&c| c == 0.0) {
            return Ok(Self(vec![1.0 / size as f64; size]));
        }
        Ok(Self::smooth(counts, alpha))
    }

    /// Turns a noisy upload into a distribution: clamp at zero, smooth,
    /// renormalize.
    pub fn from_noisy(noisy: &[f64], alpha: f64) -> Result<Self, NeighborError> {
        if noisy.is_empty() {
            return Err(NeighborError::EmptyVocabulary);
        }
        let clamped: Vec<f64> = noisy.iter().map(|&v| if v.is_finite() { v.max(0.0) } else { 0.0 }).collect();
        if clamped.iter().all(|&c| c == 0.0) {
            return Ok(Self(vec![1.0 / noisy.len() as f64; noisy.len()]));
        }
        Ok(Self::smooth(clamped, alpha))
    }

    fn smooth(mut weights: Vec<f64>, alpha: f64) -> Self {
        let total: f64 = weights.iter().sum::<f64>();
        for w in &mut weights {
            *w = *w / total + alpha;
        }
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        Self(weights)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn kl_divergence(p: &CheckinDistribution, q: &CheckinDistribution) -> Result<f64, NeighborError> {
    kl_raw(p.probs(), q.probs())
}

/// KL(p‖q) in nats over plain slices; zero entries of `p` contribute 0.
pub fn kl_raw(p: &[f64], q: &[f64]) -> Result<f64, NeighborError> {
    if p.len() != q.len() {
        return Err(NeighborError::LengthMismatch(p.len(), q.len()));
    }
    Ok(p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborKind {
    /// Closest regional distribution.
    Geographical,
    /// Closest category distribution.
    Semantic,
}

/// The region and category distributions a user uploads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserDistributions {
    pub region: CheckinDistribution,
    pub category: CheckinDistribution,
}

impl UserDistributions {
    pub fn get(&self, kind: NeighborKind) -> &CheckinDistribution {
        match kind {
            NeighborKind::Geographical => &self.region,
            NeighborKind::Semantic => &self.category,
        }
    }
}

pub type Population = BTreeMap<UserId, UserDistributions>;

/// Candidate minimizing KL(query‖candidate); ties go to the smaller id.
pub fn nearest_neighbor(
    query: &UserId,
    candidates: &[UserId],
    population: &Population,
    kind: NeighborKind,
) -> Result<UserId, NeighborError> {
    let q = population.get(query).ok_or_else(|| NeighborError::UnknownUser(query.0.clone()))?.get(kind);
    let mut best: Option<(f64, &UserId)> = None;
    for c in candidates.iter().filter(|c| *c != query) {
        let d = population.get(c).ok_or_else(|| NeighborError::UnknownUser(c.0.clone()))?.get(kind);
        let kl = kl_divergence(q, d)?;
        let better = match best {
            None => true,
            Some((b, id)) => kl < b || (kl == b && c < id),
        };
        if better {
            best = Some((kl, c));
        }
    }
    best.map(|(_, id)| id.clone()).ok_or_else(|| NeighborError::NoCandidates(query.0.clone()))
}

/// Adjacency of `user` in the (flipped) graph.
pub fn social_neighbors(graph: &SocialGraph, user: &UserId) -> Vec<UserId> {
    let mut out = graph.neighbors(user);
    out.sort();
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub geographical: Option<UserId>,
    pub semantic: Option<UserId>,
    pub social: Vec<UserId>,
}

impl NeighborSet {
    pub fn all(&self) -> impl Iterator<Item = &UserId> {
        self.geographical.iter().chain(&self.semantic).chain(&self.social)
    }
}

/// Neighbors of `query` among `participants` (users with stored
/// preferences). At most `max_social` social neighbors are kept.
pub fn find_neighbors(
    query: &UserId,
    population: &Population,
    graph: &SocialGraph,
    participants: &BTreeSet<UserId>,
    max_social: usize,
) -> Result<NeighborSet, NeighborError> {
    let candidates: Vec<UserId> =
        participants.iter().filter(|u| *u != query && population.contains_key(*u)).cloned().collect();
    let pick = |kind| match nearest_neighbor(query, &candidates, population, kind) {
        Ok(u) => Ok(Some(u)),
        Err(NeighborError::NoCandidates(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let social = social_neighbors(graph, query)
        .into_iter()
        .filter(|u| u != query && participants.contains(u))
        .take(max_social)
        .collect();
    Ok(NeighborSet { geographical: pick(NeighborKind::Geographical)?, semantic: pick(NeighborKind::Semantic)?, social })
}

fn render_one(prefs: Option<&FineGrainedPreferences>, kind: PrefKind) -> String {
    match prefs {
        Some(p) if !p.is_empty_kind(kind) => p.render(kind),
        _ => "none".into(),
    }
}

/// One model call per preference type over the neighbors' stored
/// preferences. Returns empty preferences without calling the model when no
/// neighbor has anything stored; a type whose answer never parses stays
/// empty.
pub fn summarize_neighbor_preferences(
    neighbors: &NeighborSet,
    kb: &KnowledgeBase,
    client: &LlmClient,
    prompts: &PromptSet,
    repair_retries: usize,
) -> Result<FineGrainedPreferences, NeighborError> {
    let geo = neighbors.geographical.as_ref().and_then(|u| kb.get(u));
    let sem = neighbors.semantic.as_ref().and_then(|u| kb.get(u));
    let social: Vec<FineGrainedPreferences> = neighbors.social.iter().filter_map(|u| kb.get(u)).collect();
    let mut out = FineGrainedPreferences::default();
    if geo.is_none() && sem.is_none() && social.is_empty() {
        return Ok(out);
    }
    let system = prompts.task_instruction(ALL_POIS)?;
    for kind in PrefKind::ALL {
        let social_text = {
            let parts: Vec<String> =
                social.iter().filter(|p| !p.is_empty_kind(kind)).map(|p| p.render(kind)).collect();
            if parts.is_empty() { "none".to_string() } else { parts.join("; ") }
        };
        let turn = prompts.summarize(kind, &render_one(geo.as_ref(), kind), &render_one(sem.as_ref(), kind), &social_text)?;
        let repair = prompts.repair(turn.format)?;
        let tag = format!("P5:{}", kind.tag());
        let mut conv = Conversation::new(system.clone());
        if kind.is_transition() {
            let answer = conv.ask(client, &tag, turn.text, &repair, repair_retries, parse_pair_list)?;
            if let (Ok(v), Some(slot)) = (answer.value, out.transition_mut(kind.aspect())) {
                *slot = v;
            }
        } else {
            let answer = conv.ask(client, &tag, turn.text, &repair, repair_retries, parse_temporal_map)?;
            if let Ok(v) = answer.value {
                *out.temporal_mut(kind.aspect()) = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::llm::{ChatSettings, ClientPolicy, Responder, ScriptedBackend};
    use crate::prompting::TransitionPrefs;

    fn uid(s: &str) -> UserId {
        UserId(s.into())
    }

    fn dist(v: &[f64]) -> CheckinDistribution {
        CheckinDistribution(v.to_vec())
    }

    #[test]
    fn distributions() {
        let d = CheckinDistribution::from_tokens([0, 0, 1, 2], 3, DEFAULT_SMOOTHING).unwrap();
        for (a, b) in d.probs().iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-5);
        }
        let d = CheckinDistribution::from_tokens([], 4, DEFAULT_SMOOTHING).unwrap();
        assert_eq!(d.probs(), [0.25; 4]);
        let d = CheckinDistribution::from_tokens([0, 0], 3, DEFAULT_SMOOTHING).unwrap();
        assert!(d.probs()[0] > 0.99999 && d.probs()[1] > 0.0);
        assert!(CheckinDistribution::from_tokens([3], 3, DEFAULT_SMOOTHING).is_err());
        assert!(CheckinDistribution::from_tokens([], 0, DEFAULT_SMOOTHING).is_err());
    }

    #[test]
    fn kl_worked_values() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.25, 0.75]);
        assert!((kl_divergence(&p, &q).unwrap() - 0.143841).abs() < 1e-6);
        assert!((kl_divergence(&q, &p).unwrap() - 0.130812).abs() < 1e-6);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!(matches!(kl_divergence(&p, &dist(&[1.0])), Err(NeighborError::LengthMismatch(2, 1))));
    }

    fn population(rows: &[(&str, &[f64])]) -> Population {
        rows.iter()
            .map(|(u, v)| (uid(u), UserDistributions { region: dist(v), category: dist(v) }))
            .collect()
    }

    #[test]
    fn nearest_neighbor_cases() {
        let pop = population(&[("a", &[0.5, 0.5]), ("b", &[0.9, 0.1]), ("c", &[0.5, 0.5]), ("d", &[0.5, 0.5])]);
        let all: Vec<UserId> = pop.keys().cloned().collect();
        assert_eq!(nearest_neighbor(&uid("a"), &all, &pop, NeighborKind::Geographical).unwrap(), uid("c"));
        assert_eq!(nearest_neighbor(&uid("a"), &[uid("b")], &pop, NeighborKind::Semantic).unwrap(), uid("b"));
        assert!(matches!(
            nearest_neighbor(&uid("a"), &[uid("a")], &pop, NeighborKind::Semantic),
            Err(NeighborError::NoCandidates(_))
        ));
    }

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> CheckinDistribution {
        let tokens: Vec<u32> = (0..rng.random_range(0..20)).map(|_| rng.random_range(0..n as u32)).collect();
        CheckinDistribution::from_tokens(tokens, n, DEFAULT_SMOOTHING).unwrap()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pop: Population = (0..10)
                .map(|i| (uid(&format!("u{i}")), UserDistributions { region: random_dist(&mut rng, 6), category: random_dist(&mut rng, 4) }))
                .collect();
            let users: Vec<UserId> = pop.keys().cloned().collect();
            for q in &users {
                for kind in [NeighborKind::Geographical, NeighborKind::Semantic] {
                    let mut table: Vec<(f64, &UserId)> = users
                        .iter()
                        .filter(|c| *c != q)
                        .map(|c| (kl_divergence(pop[q].get(kind), pop[c].get(kind)).unwrap(), c))
                        .collect();
                    table.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
                    assert_eq!(&nearest_neighbor(q, &users, &pop, kind).unwrap(), table[0].1);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_on_self(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_dist(&mut rng, n);
            let q = random_dist(&mut rng, n);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }

        #[test]
        fn nearest_is_order_independent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pop: Population = (0..6)
                .map(|i| {
                    // Few tokens so exact ties are common.
                    let t: Vec<u32> = (0..2).map(|_| rng.random_range(0..2)).collect();
                    let d = CheckinDistribution::from_tokens(t, 2, DEFAULT_SMOOTHING).unwrap();
                    (uid(&format!("u{i}")), UserDistributions { region: d.clone(), category: d })
                })
                .collect();
            let mut users: Vec<UserId> = pop.keys().cloned().collect();
            let a = nearest_neighbor(&users[0].clone(), &users, &pop, NeighborKind::Geographical).unwrap();
            users.reverse();
            let b = nearest_neighbor(&users[5].clone(), &users, &pop, NeighborKind::Geographical).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn noisy_uploads_become_distributions(v in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let d = CheckinDistribution::from_noisy(&v, DEFAULT_SMOOTHING).unwrap();
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(d.probs().iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn social_reads_adjacency() {
        let users: Vec<UserId> = ["a", "b", "c", "d"].iter().map(|s| uid(s)).collect();
        let g = SocialGraph::new(users.clone(), &[(uid("a"), uid("c")), (uid("b"), uid("a"))]);
        assert_eq!(social_neighbors(&g, &uid("a")), [uid("b"), uid("c")]);
        assert!(social_neighbors(&g, &uid("d")).is_empty());
    }

    #[test]
    fn find_neighbors_respects_participants() {
        let pop = population(&[("a", &[0.5, 0.5]), ("b", &[0.5, 0.5]), ("c", &[0.4, 0.6]), ("d", &[0.1, 0.9])]);
        let users: Vec<UserId> = pop.keys().cloned().collect();
        let g = SocialGraph::new(users, &[(uid("a"), uid("b")), (uid("a"), uid("d"))]);
        let participants: BTreeSet<UserId> = [uid("c"), uid("d")].into();
        let set = find_neighbors(&uid("a"), &pop, &g, &participants, 3).unwrap();
        assert_eq!(set.geographical, Some(uid("c")));
        assert_eq!(set.social, [uid("d")]);
        assert!(set.all().all(|u| u != &uid("a")));
        let empty = find_neighbors(&uid("a"), &pop, &g, &BTreeSet::new(), 3).unwrap();
        assert_eq!(empty, NeighborSet::default());
    }

    fn client(b: ScriptedBackend) -> LlmClient {
        LlmClient::new(Arc::new(b), ClientPolicy::immediate(), ChatSettings::default())
    }

    fn with_transitions(pairs: &[(&str, &str)]) -> FineGrainedPreferences {
        FineGrainedPreferences {
            categorical_transition: TransitionPrefs(pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()),
            ..Default::default()
        }
    }

    /// Answers with the pairs present in all three neighbor blocks.
    fn intersection_mock() -> ScriptedBackend {
        ScriptedBackend::new().on(
            "P5",
            Responder::func(|req| {
                let text = req.last_user();
                let re = regex::Regex::new(r"\{([^{}]*)\}").unwrap();
                let sets: Vec<TransitionPrefs> = re
                    .captures_iter(text)
                    .take(3)
                    .map(|c| parse_pair_list(&format!("{{{}}}", &c[1])).unwrap_or_default())
                    .collect();
                if sets.len() < 3 {
                    return Ok("none".into());
                }
                let common: Vec<(String, String)> =
                    sets[0].0.iter().filter(|p| sets[1..].iter().all(|s| s.0.contains(p))).cloned().collect();
                Ok(format!("{{{}}}", TransitionPrefs(common).to_text()))
            }),
        )
    }

    #[test]
    fn summary_keeps_shared_transition() {
        let kb = KnowledgeBase::in_memory();
        kb.put(uid("g"), with_transitions(&[("Restaurants", "Bars"), ("Subway", "Gym")])).unwrap();
        kb.put(uid("s"), with_transitions(&[("Restaurants", "Bars")])).unwrap();
        kb.put(uid("f"), with_transitions(&[("Restaurants", "Bars"), ("Bar", "Movie Theater")])).unwrap();
        let set = NeighborSet { geographical: Some(uid("g")), semantic: Some(uid("s")), social: vec![uid("f")] };
        let c = client(intersection_mock());
        let out = summarize_neighbor_preferences(&set, &kb, &c, &PromptSet::builtin(), 1).unwrap();
        assert!(out.categorical_transition.contains("Restaurants", "Bars"));
        assert!(!out.categorical_transition.contains("Subway", "Gym"));
        // Four kinds have nothing to summarize and get one repair each.
        assert_eq!(c.count_calls("P5:"), 5 + 4);
        assert_eq!(c.count_calls("P5:regional_transition:repair"), 1);
    }

    #[test]
    fn summary_without_stored_neighbors_is_empty() {
        let kb = KnowledgeBase::in_memory();
        let set = NeighborSet { geographical: Some(uid("g")), semantic: None, social: vec![] };
        let c = client(ScriptedBackend::new());
        let out = summarize_neighbor_preferences(&set, &kb, &c, &PromptSet::builtin(), 1).unwrap();
        assert!(out.is_empty());
        assert_eq!(c.total_calls(), 0);
    }
}
