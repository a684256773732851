//! End-to-end wiring: what each user uploads, batch extraction into the
//! preference store, and building recommendation requests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use chrono::Weekday;

use crate::corpus::{
    Aspect, AspectViews, Catalog, CheckInRecord, CorpusError, Dataset, DatasetSplit, EvalInstance, SocialGraph, UserId,
    Vocabularies,
};
use crate::extraction::{extract_user_preferences, ExtractionConfig, ExtractionError, ExtractionInput, ReflectionSources};
use crate::kb::{KbError, KnowledgeBase};
use crate::llm::LlmClient;
use crate::neighbors::{CheckinDistribution, NeighborError, Population, UserDistributions, DEFAULT_SMOOTHING};
use crate::privacy::{flip_social_links, fuzzify_poi, laplace_perturb, perturb_sequences, Mechanisms, PrivacyConfig, PrivacyError};
use crate::prompting::PromptSet;
use crate::recommender::{NeighborSources, RecommendationRequest, Recommender, RecommenderConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown ablation {0:?}")]
    UnknownAblation(String),
    #[error("participation rate {0} outside (0, 1]")]
    BadParticipation(f64),
    #[error("POI {0} is not in the catalog")]
    UnknownPoi(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Stream ids keep seeds for different purposes apart.
pub mod streams {
    pub const UPLOAD: u64 = 1;
    pub const GRAPH: u64 = 2;
    pub const PARTICIPATION: u64 = 3;
    pub const REQUEST: u64 = 4;
    pub const CANDIDATES: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `index` of `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub privacy: PrivacyConfig,
    pub mechanisms: Mechanisms,
    pub extraction: ExtractionConfig,
    pub recommender: RecommenderConfig,
    /// Share of users whose stored preferences may serve as neighbors.
    pub participation: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            privacy: PrivacyConfig::new(1.0).expect("valid default budget"),
            mechanisms: Mechanisms::default(),
            extraction: ExtractionConfig::default(),
            recommender: RecommenderConfig::default(),
            participation: 1.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Applies ablation switches: `-MP` (and `-MP-C`, `-MP-R`, `-MP-D`),
    /// `-SR`, `-NR`, `-PT` (and `-PT-S`, `-PT-D`, `-PT-P`). The leading dash
    /// is optional.
    pub fn apply_ablations<S: AsRef<str>>(&mut self, flags: &[S]) -> Result<(), PipelineError> {
        for flag in flags {
            let raw = flag.as_ref().trim();
            let f = raw.trim_start_matches('-').to_ascii_uppercase();
            let drop_aspect = |cfg: &mut Self, a: Aspect| {
                cfg.extraction.aspects.retain(|x| *x != a);
                cfg.recommender.aspects.retain(|x| *x != a);
            };
            match f.as_str() {
                "" => {}
                "MP" => {
                    self.extraction.aspects.clear();
                    self.recommender.aspects.clear();
                }
                "MP-C" => drop_aspect(self, Aspect::Category),
                "MP-R" => drop_aspect(self, Aspect::Region),
                "MP-D" => drop_aspect(self, Aspect::Distance),
                "SR" => self.extraction.reflection = ReflectionSources::none(),
                "NR" => self.recommender.neighbors = false,
                "PT" => self.mechanisms = Mechanisms::none(),
                "PT-S" => self.mechanisms.sequences = false,
                "PT-D" => self.mechanisms.distributions = false,
                "PT-P" => self.mechanisms.pois = false,
                _ => return Err(PipelineError::UnknownAblation(raw.to_string())),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.privacy.validate()?;
        self.extraction.validate()?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(PipelineError::BadParticipation(self.participation));
        }
        Ok(())
    }

    /// Budget recorded with extracted preferences.
    pub fn sequence_epsilon(&self) -> Option<f64> {
        self.mechanisms.sequences.then_some(self.privacy.epsilon)
    }
}

/// Empirical distribution, perturbed with Laplace noise when `epsilon` is
/// given, then clamped, smoothed, and renormalized.
pub fn upload_distribution<R: rand::Rng + ?Sized>(
    tokens: &[u32],
    size: usize,
    epsilon: Option<f64>,
    rng: &mut R,
) -> Result<CheckinDistribution, PipelineError> {
    let Some(eps) = epsilon else {
        return Ok(CheckinDistribution::from_tokens(tokens.iter().copied(), size, DEFAULT_SMOOTHING)?);
    };
    let mut freq = vec![0.0; size];
    for &t in tokens {
        if let Some(f) = freq.get_mut(t as usize) {
            *f += 1.0;
        }
    }
    let total: f64 = freq.iter().sum();
    if total == 0.0 {
        freq.iter_mut().for_each(|f| *f = 1.0 / size as f64);
    } else {
        freq.iter_mut().for_each(|f| *f /= total);
    }
    let noisy = laplace_perturb(&freq, eps, rng)?;
    Ok(CheckinDistribution::from_noisy(&noisy, DEFAULT_SMOOTHING)?)
}

/// Everything one user sends for extraction and neighbor search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserUpload {
    pub views: ExtractionInput,
    pub distributions: UserDistributions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Uploads {
    pub users: BTreeMap<UserId, UserUpload>,
    pub population: Population,
    pub graph: SocialGraph,
}

/// Builds each user's upload with its own seeded RNG, and the flipped
/// social graph.
pub fn collect_uploads(dataset: &Dataset, split: &DatasetSplit, cfg: &PipelineConfig) -> Result<Uploads, PipelineError> {
    let vocab = dataset.catalog.vocabularies(cfg.privacy.distance_bins.clone());
    let bins = &cfg.privacy.distance_bins;
    let built: Vec<(UserId, UserUpload)> = split
        .users
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let mut rng = rng_for(cfg.seed, streams::UPLOAD, i as u64);
            let current_raw = match u.test.first() {
                Some(t) => t.context.clone(),
                None => u.train.last().cloned().unwrap_or_default(),
            };
            let mut history: Vec<AspectViews> = u.train.iter().map(|s| AspectViews::from_sequence(s, bins)).collect();
            let mut current = AspectViews::from_sequence(&current_raw, bins);
            if cfg.mechanisms.sequences {
                for h in &mut history {
                    *h = perturb_sequences(h, &vocab, cfg.privacy.epsilon, &mut rng)?;
                }
                current = perturb_sequences(&current, &vocab, cfg.privacy.epsilon, &mut rng)?;
            }
            let train = u.train.iter().flatten();
            let regions: Vec<u32> = train.clone().map(|c| c.region_id).collect();
            let categories: Vec<u32> = train.map(|c| c.category_id).collect();
            let eps = cfg.mechanisms.distributions.then_some(cfg.privacy.epsilon);
            let distributions = UserDistributions {
                region: upload_distribution(&regions, vocab.size(Aspect::Region), eps, &mut rng)?,
                category: upload_distribution(&categories, vocab.size(Aspect::Category), eps, &mut rng)?,
            };
            let views = ExtractionInput { user_id: u.user_id.clone(), history, current };
            Ok((u.user_id.clone(), UserUpload { views, distributions }))
        })
        .collect::<Result<_, PipelineError>>()?;
    let users: BTreeMap<UserId, UserUpload> = built.into_iter().collect();
    let population = users.iter().map(|(k, v)| (k.clone(), v.distributions.clone())).collect();
    let graph = if cfg.mechanisms.distributions {
        flip_social_links(&dataset.social, cfg.privacy.flip, &mut rng_for(cfg.seed, streams::GRAPH, 0))
    } else {
        dataset.social.clone()
    };
    Ok(Uploads { users, population, graph })
}

/// Writes `uploads.ndjson` and `graph.json` into `dir`.
pub fn write_uploads(dir: &Path, uploads: &Uploads) -> Result<(), PipelineError> {
    let io = |e| CorpusError::Io { path: dir.display().to_string(), source: e };
    fs::create_dir_all(dir).map_err(io)?;
    crate::corpus::write_ndjson(&dir.join("uploads.ndjson"), uploads.users.values())?;
    let path = dir.join("graph.json");
    let text = serde_json::to_string(&uploads.graph)
        .map_err(|e| CorpusError::Json { path: path.display().to_string(), source: e })?;
    fs::write(&path, text).map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
    Ok(())
}

pub fn read_uploads(dir: &Path) -> Result<Uploads, PipelineError> {
    let users: Vec<UserUpload> = crate::corpus::read_ndjson(&dir.join("uploads.ndjson"))?;
    let users: BTreeMap<UserId, UserUpload> = users.into_iter().map(|u| (u.views.user_id.clone(), u)).collect();
    let path = dir.join("graph.json");
    let text = fs::read_to_string(&path).map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
    let graph = serde_json::from_str(&text).map_err(|e| CorpusError::Json { path: path.display().to_string(), source: e })?;
    let population = users.iter().map(|(k, v)| (k.clone(), v.distributions.clone())).collect();
    Ok(Uploads { users, population, graph })
}

/// A seeded `rate` share of `users`, at least one.
pub fn select_participants(users: &[UserId], rate: f64, seed: u64) -> BTreeSet<UserId> {
    let mut order = users.to_vec();
    order.sort();
    order.shuffle(&mut rng_for(seed, streams::PARTICIPATION, 0));
    let k = ((rate * users.len() as f64).round() as usize).clamp(1.min(users.len()), users.len());
    order.into_iter().take(k).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionStats {
    pub users: usize,
    pub parse_failures: usize,
    pub segments: usize,
}

/// Extracts every uploaded user's preferences in parallel and stores them
/// in one write.
pub fn extract_into_kb(
    uploads: &Uploads,
    vocab: &Vocabularies,
    cfg: &PipelineConfig,
    client: &LlmClient,
    prompts: &PromptSet,
    kb: &KnowledgeBase,
) -> Result<ExtractionStats, PipelineError> {
    let users: Vec<&UserUpload> = uploads.users.values().collect();
    let outcomes = users
        .par_iter()
        .map(|u| extract_user_preferences(&u.views, vocab, &cfg.extraction, client, prompts))
        .collect::<Result<Vec<_>, _>>()?;
    let mut stats = ExtractionStats { users: users.len(), ..Default::default() };
    let mut items = Vec::with_capacity(users.len());
    for (u, mut o) in users.iter().zip(outcomes) {
        stats.parse_failures += o.parse_failures;
        stats.segments += o.segments;
        o.preferences.meta.epsilon = cfg.sequence_epsilon();
        items.push((u.views.user_id.clone(), o.preferences));
    }
    kb.put_many(items)?;
    Ok(stats)
}

/// On-device preparation of one request: fuzzify the visited POIs and
/// perturb the views of `context`, with an RNG seeded per request.
#[allow(clippy::too_many_arguments)]
pub fn prepare_request(
    catalog: &Catalog,
    vocab: &Vocabularies,
    user_id: &UserId,
    context: &[CheckInRecord],
    (day, hour): (Weekday, u8),
    candidates: Vec<usize>,
    cfg: &PipelineConfig,
    request_index: u64,
) -> Result<RecommendationRequest, PipelineError> {
    let mut rng = rng_for(cfg.seed, streams::REQUEST, request_index);
    let mut visits = Vec::with_capacity(context.len());
    for c in context {
        let pos = catalog.position(&c.poi_id).ok_or_else(|| PipelineError::UnknownPoi(c.poi_id.0.clone()))?;
        visits.push(if cfg.mechanisms.pois { fuzzify_poi(pos, catalog, &cfg.privacy, &mut rng)?.poi } else { pos });
    }
    let mut current = AspectViews::from_sequence(context, &cfg.privacy.distance_bins);
    if cfg.mechanisms.sequences {
        current = perturb_sequences(&current, vocab, cfg.privacy.epsilon, &mut rng)?;
    }
    Ok(RecommendationRequest { user_id: user_id.clone(), current, visits, day, hour, candidates })
}

/// Request for an evaluation instance, queried at the ground truth's time.
pub fn build_request(
    catalog: &Catalog,
    vocab: &Vocabularies,
    instance: &EvalInstance,
    candidates: Vec<usize>,
    cfg: &PipelineConfig,
    request_index: u64,
) -> Result<RecommendationRequest, PipelineError> {
    let at = (instance.truth.day_of_week, instance.truth.hour_of_day);
    prepare_request(catalog, vocab, &instance.user_id, &instance.context, at, candidates, cfg, request_index)
}

/// Uploads, participants, and a populated store for one configuration.
pub struct Experiment<'a> {
    pub dataset: &'a Dataset,
    pub split: DatasetSplit,
    pub config: PipelineConfig,
    pub vocab: Vocabularies,
    pub uploads: Uploads,
    pub participants: BTreeSet<UserId>,
    pub kb: KnowledgeBase,
    pub extraction: ExtractionStats,
}

impl<'a> Experiment<'a> {
    /// Collects uploads and extracts every user's preferences into `kb`.
    /// All users are extracted since each needs its own preferences at
    /// request time; participation only limits who may serve as a neighbor.
    pub fn prepare(
        dataset: &'a Dataset,
        split: DatasetSplit,
        config: PipelineConfig,
        client: &LlmClient,
        prompts: &PromptSet,
        kb: KnowledgeBase,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let uploads = collect_uploads(dataset, &split, &config)?;
        let mut exp = Self::assemble(dataset, split, config, uploads, kb)?;
        if !exp.config.extraction.aspects.is_empty() {
            exp.extraction = extract_into_kb(&exp.uploads, &exp.vocab, &exp.config, client, prompts, &exp.kb)?;
        }
        Ok(exp)
    }

    /// Wraps existing uploads and a store without extracting anything.
    pub fn assemble(
        dataset: &'a Dataset,
        split: DatasetSplit,
        config: PipelineConfig,
        uploads: Uploads,
        kb: KnowledgeBase,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let vocab = dataset.catalog.vocabularies(config.privacy.distance_bins.clone());
        let users: Vec<UserId> = uploads.users.keys().cloned().collect();
        let participants = select_participants(&users, config.participation, config.seed);
        Ok(Self { dataset, split, config, vocab, uploads, participants, kb, extraction: ExtractionStats::default() })
    }

    pub fn recommender<'b>(&'b self, client: &'b LlmClient, prompts: &'b PromptSet) -> Recommender<'b> {
        let sources = NeighborSources {
            population: &self.uploads.population,
            graph: &self.uploads.graph,
            participants: &self.participants,
        };
        Recommender::new(&self.dataset.catalog, &self.vocab, &self.kb, sources, client, prompts, self.config.recommender.clone())
    }

    pub fn request(&self, instance: &EvalInstance, candidates: Vec<usize>, index: u64) -> Result<RecommendationRequest, PipelineError> {
        build_request(&self.dataset.catalog, &self.vocab, instance, candidates, &self.config, index)
    }
}
