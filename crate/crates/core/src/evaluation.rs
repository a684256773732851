//! Metrics, candidate sampling, baselines, repeated runs, and sweeps.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use indexmap::IndexMap;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Catalog, EvalInstance, PoiId, UserId};
use crate::neighbors::{nearest_neighbor, NeighborKind, Population};
use crate::pipeline::{derive_seed, streams, Experiment, PipelineConfig, PipelineError};
use crate::privacy::FlipParams;
use crate::recommender::{rank_by_distance, RecommendError, Recommender};

pub const DEFAULT_RUNS: usize = 10;
pub const DEFAULT_CANDIDATES: usize = 100;
pub const METRIC_NAMES: [&str; 4] = ["ACC@1", "ACC@5", "ACC@10", "MRR"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("catalog has {have} POIs, {need} candidates requested")]
    CatalogTooSmall { have: usize, need: usize },
    #[error("ground truth {0} is not in the catalog")]
    UnknownTruth(String),
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("{method}: {source}")]
    Ranker { method: String, source: Box<dyn std::error::Error + Send + Sync> },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `k` distinct catalog positions out of `n`, always including `truth`, in
/// random order.
pub fn sample_candidates<R: Rng + ?Sized>(n: usize, truth: usize, k: usize, rng: &mut R) -> Result<Vec<usize>, EvalError> {
    if n < k || k == 0 {
        return Err(EvalError::CatalogTooSmall { have: n, need: k });
    }
    if truth >= n {
        return Err(EvalError::UnknownTruth(truth.to_string()));
    }
    let mut out: Vec<usize> = index::sample(rng, n - 1, k - 1).into_iter().map(|i| if i >= truth { i + 1 } else { i }).collect();
    out.push(truth);
    out.shuffle(rng);
    Ok(out)
}

/// 1 when `truth` is in the first `k` entries of `ranked`.
pub fn acc_at_k<T: PartialEq>(ranked: &[T], truth: &T, k: usize) -> f64 {
    if ranked.iter().take(k).any(|r| r == truth) { 1.0 } else { 0.0 }
}

/// Reciprocal rank of `truth`, 0 when absent.
pub fn mrr<T: PartialEq>(ranked: &[T], truth: &T) -> f64 {
    ranked.iter().position(|r| r == truth).map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc1: f64,
    pub acc5: f64,
    pub acc10: f64,
    pub mrr: f64,
}

impl Metrics {
    pub fn of<T: PartialEq>(ranked: &[T], truth: &T) -> Self {
        Self {
            acc1: acc_at_k(ranked, truth, 1),
            acc5: acc_at_k(ranked, truth, 5),
            acc10: acc_at_k(ranked, truth, 10),
            mrr: mrr(ranked, truth),
        }
    }

    pub fn mean(items: &[Metrics]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let mut m = Self::default();
        for x in items {
            m.acc1 += x.acc1;
            m.acc5 += x.acc5;
            m.acc10 += x.acc10;
            m.mrr += x.mrr;
        }
        Self { acc1: m.acc1 / n, acc5: m.acc5 / n, acc10: m.acc10 / n, mrr: m.mrr / n }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.acc1, self.acc5, self.acc10, self.mrr]
    }

    /// ACC@1 ≤ ACC@5 ≤ ACC@10, MRR ≥ ACC@1, and everything in [0, 1].
    pub fn is_consistent(&self) -> bool {
        let eps = 1e-12;
        self.values().iter().all(|v| (0.0..=1.0 + eps).contains(v))
            && self.acc1 <= self.acc5 + eps
            && self.acc5 <= self.acc10 + eps
            && self.mrr + eps >= self.acc1
    }
}

/// One evaluation target as seen by a ranker.
pub struct RankQuery<'a> {
    pub run: usize,
    pub index: usize,
    pub instance: &'a EvalInstance,
    pub candidates: &'a [usize],
}

#[derive(Debug, Clone, Default)]
pub struct Ranked {
    /// Catalog positions, best first.
    pub positions: Vec<usize>,
    pub transcript: Option<serde_json::Value>,
}

pub trait Ranker: Sync {
    fn name(&self) -> String;
    fn rank(&self, query: &RankQuery<'_>) -> Result<Ranked, EvalError>;
}

/// Candidates by training check-in count, ties by POI id.
pub struct MostPop<'a> {
    catalog: &'a Catalog,
    counts: Vec<usize>,
}

impl<'a> MostPop<'a> {
    pub fn new<'b>(catalog: &'a Catalog, train: impl IntoIterator<Item = &'b PoiId>) -> Self {
        let mut counts = vec![0; catalog.len()];
        for id in train {
            if let Some(p) = catalog.position(id) {
                counts[p] += 1;
            }
        }
        Self { catalog, counts }
    }
}

impl Ranker for MostPop<'_> {
    fn name(&self) -> String {
        "MostPop".into()
    }

    fn rank(&self, q: &RankQuery<'_>) -> Result<Ranked, EvalError> {
        let mut out = q.candidates.to_vec();
        out.sort_by(|&a, &b| {
            self.counts[b].cmp(&self.counts[a]).then_with(|| self.catalog.poi(a).poi_id.cmp(&self.catalog.poi(b).poi_id))
        });
        Ok(Ranked { positions: out, transcript: None })
    }
}

/// Candidates by distance from the last context check-in.
pub struct Dist<'a> {
    catalog: &'a Catalog,
}

impl<'a> Dist<'a> {
    pub fn new(catalog: &'a Catalog) -> Self {
        Self { catalog }
    }
}

impl Ranker for Dist<'_> {
    fn name(&self) -> String {
        "Dist".into()
    }

    fn rank(&self, q: &RankQuery<'_>) -> Result<Ranked, EvalError> {
        let from = match q.instance.context.last() {
            Some(c) => self.catalog.position(&c.poi_id).ok_or_else(|| EvalError::UnknownTruth(c.poi_id.0.clone()))?,
            None => return Ok(Ranked { positions: q.candidates.to_vec(), transcript: None }),
        };
        Ok(Ranked { positions: rank_by_distance(self.catalog, from, q.candidates), transcript: None })
    }
}

/// The full pipeline: on-device request preparation, then the recommender.
pub struct LlmRanker<'a, 'b> {
    pub name: String,
    pub experiment: &'a Experiment<'b>,
    pub recommender: Recommender<'a>,
}

impl<'a, 'b> LlmRanker<'a, 'b> {
    pub fn new(name: impl Into<String>, experiment: &'a Experiment<'b>, recommender: Recommender<'a>) -> Self {
        Self { name: name.into(), experiment, recommender }
    }
}

impl Ranker for LlmRanker<'_, '_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn rank(&self, q: &RankQuery<'_>) -> Result<Ranked, EvalError> {
        let request_index = ((q.run as u64) << 32) | q.index as u64;
        let req = self.experiment.request(q.instance, q.candidates.to_vec(), request_index)?;
        let wrap = |e: RecommendError| EvalError::Ranker { method: self.name.clone(), source: Box::new(e) };
        let result = self.recommender.recommend(&req).map_err(wrap)?;
        let positions = result.positions.iter().map(|&i| q.candidates[i]).collect();
        Ok(Ranked { positions, transcript: Some(serde_json::to_value(&result)?) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub runs: usize,
    pub num_candidates: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { runs: DEFAULT_RUNS, num_candidates: DEFAULT_CANDIDATES, seed: 0 }
    }
}

impl EvalSettings {
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|r| derive_seed(self.seed, streams::CANDIDATES, r)).collect()
    }
}

/// Per-run metric tables for each method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub per_run: IndexMap<String, Vec<Metrics>>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation, 0 for a single run.
    pub std: f64,
}

fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return Summary { mean: 0.0, std: 0.0 };
    }
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    Summary { mean, std }
}

impl EvalRun {
    pub fn mean(&self, method: &str) -> Option<Metrics> {
        self.per_run.get(method).map(|r| Metrics::mean(r))
    }

    /// (method, metric, summary) rows in method order.
    pub fn summary(&self) -> Vec<(String, &'static str, Summary)> {
        let mut rows = Vec::new();
        for (method, runs) in &self.per_run {
            for (k, name) in METRIC_NAMES.iter().enumerate() {
                let xs: Vec<f64> = runs.iter().map(|m| m.values()[k]).collect();
                rows.push((method.clone(), *name, summarize(&xs)));
            }
        }
        rows
    }

    pub fn is_consistent(&self) -> bool {
        self.per_run.values().flatten().all(Metrics::is_consistent)
    }
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    run: usize,
    seed: u64,
    method: &'a str,
    index: usize,
    user_id: &'a UserId,
    truth: &'a PoiId,
    candidates: Vec<&'a PoiId>,
    ranking: Vec<&'a PoiId>,
    metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<serde_json::Value>,
}

/// Scores every ranker on every instance for `settings.runs` runs. Candidates
/// are resampled per run from a seed derived from the master seed and shared
/// by all methods within a run. Transcripts, one JSON line per ranked
/// instance, go to `transcripts` when given.
pub fn run_eval(
    rankers: &[&dyn Ranker],
    instances: &[&EvalInstance],
    catalog: &Catalog,
    settings: &EvalSettings,
    config: serde_json::Value,
    mut transcripts: Option<&mut dyn Write>,
) -> Result<EvalRun, EvalError> {
    if settings.runs == 0 {
        return Err(EvalError::NoRuns);
    }
    let truths: Vec<usize> = instances
        .iter()
        .map(|i| catalog.position(&i.truth.poi_id).ok_or_else(|| EvalError::UnknownTruth(i.truth.poi_id.0.clone())))
        .collect::<Result<_, _>>()?;
    let seeds = settings.run_seeds();
    let mut per_run: IndexMap<String, Vec<Metrics>> = rankers.iter().map(|r| (r.name(), Vec::new())).collect();
    for (run, &seed) in seeds.iter().enumerate() {
        let candidates: Vec<Vec<usize>> = truths
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::CANDIDATES, i as u64));
                sample_candidates(catalog.len(), t, settings.num_candidates, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        for ranker in rankers {
            let ranked: Vec<Ranked> = (0..instances.len())
                .into_par_iter()
                .map(|i| ranker.rank(&RankQuery { run, index: i, instance: instances[i], candidates: &candidates[i] }))
                .collect::<Result<_, _>>()?;
            let name = ranker.name();
            let scores: Vec<Metrics> = ranked.iter().zip(&truths).map(|(r, t)| Metrics::of(&r.positions, t)).collect();
            if let Some(w) = transcripts.as_deref_mut() {
                let id = |p: &usize| &catalog.poi(*p).poi_id;
                for (i, r) in ranked.into_iter().enumerate() {
                    let line = TranscriptLine {
                        run,
                        seed,
                        method: &name,
                        index: i,
                        user_id: &instances[i].user_id,
                        truth: &instances[i].truth.poi_id,
                        candidates: candidates[i].iter().map(id).collect(),
                        ranking: r.positions.iter().map(id).collect(),
                        metrics: scores[i],
                        detail: r.transcript,
                    };
                    serde_json::to_writer(&mut *w, &line)?;
                    w.write_all(b"\n")?;
                }
            }
            per_run.get_mut(&name).expect("registered method").push(Metrics::mean(&scores));
        }
    }
    Ok(EvalRun { runs: settings.runs, seeds, per_run, config })
}

/// `method,metric,mean,std,runs` with six decimals.
pub fn write_results_csv<W: Write>(out: W, run: &EvalRun) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "metric", "mean", "std", "runs"])?;
    for (method, metric, s) in run.summary() {
        w.write_record([method, metric.to_string(), format!("{:.6}", s.mean), format!("{:.6}", s.std), run.runs.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Epsilon,
    M,
    N,
    Participation,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epsilon" | "eps" => Some(Self::Epsilon),
            "m" => Some(Self::M),
            "n" => Some(Self::N),
            "participation" | "rho" => Some(Self::Participation),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Epsilon => "epsilon",
            Self::M => "m",
            Self::N => "n",
            Self::Participation => "participation",
        }
    }

    /// Grid used when none is given.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Self::Epsilon => vec![0.1, 0.3, 0.5, 0.7, 0.9],
            Self::M | Self::N => vec![1.0, 2.0, 3.0, 4.0, 5.0],
            Self::Participation => vec![0.25, 0.5, 0.75, 1.0],
        }
    }

    pub fn apply(self, cfg: &mut PipelineConfig, value: f64) -> Result<(), PipelineError> {
        match self {
            Self::Epsilon => {
                cfg.privacy.epsilon = value;
                cfg.privacy.flip = FlipParams::randomized_response(value)?;
            }
            Self::M => cfg.extraction.m = value.round() as usize,
            Self::N => cfg.extraction.n = value.round() as usize,
            Self::Participation => cfg.participation = value,
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub run: EvalRun,
}

/// One evaluation per grid value; `evaluate` receives the config with the
/// parameter applied.
pub fn sweep<F>(param: SweepParam, grid: &[f64], base: &PipelineConfig, mut evaluate: F) -> Result<Vec<SweepPoint>, EvalError>
where
    F: FnMut(&PipelineConfig) -> Result<EvalRun, EvalError>,
{
    grid.iter()
        .map(|&value| {
            let mut cfg = base.clone();
            param.apply(&mut cfg, value)?;
            Ok(SweepPoint { value, run: evaluate(&cfg)? })
        })
        .collect()
}

/// `parameter,value,method,metric,mean,std,runs`.
pub fn write_sweep_csv<W: Write>(out: W, param: SweepParam, points: &[SweepPoint]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "value", "method", "metric", "mean", "std", "runs"])?;
    for p in points {
        for (method, metric, s) in p.run.summary() {
            w.write_record([
                param.name().to_string(),
                p.value.to_string(),
                method,
                metric.to_string(),
                format!("{:.6}", s.mean),
                format!("{:.6}", s.std),
                p.run.runs.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Share of users whose nearest neighbor of `kind` is the same under both
/// populations. Both must hold the same users.
pub fn neighbor_agreement(clean: &Population, noisy: &Population, kind: NeighborKind) -> f64 {
    let users: Vec<&UserId> = clean.keys().filter(|u| noisy.contains_key(*u)).collect();
    if users.is_empty() {
        return 0.0;
    }
    let hits = users
        .par_iter()
        .filter(|u| {
            let others: Vec<UserId> = users.iter().map(|v| (*v).clone()).collect();
            let a = nearest_neighbor(u, &others, clean, kind).ok();
            let b = nearest_neighbor(u, &others, noisy, kind).ok();
            a.is_some() && a == b
        })
        .count();
    hits as f64 / users.len() as f64
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. `None` for mismatched lengths, fewer than two
/// points, or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Check-in count per POI.
pub fn popularity<'b>(train: impl IntoIterator<Item = &'b PoiId>) -> HashMap<PoiId, usize> {
    let mut m = HashMap::new();
    for id in train {
        *m.entry(id.clone()).or_insert(0) += 1;
    }
    m
}

/// Mean metrics per method, for quick printing.
pub fn means(run: &EvalRun) -> BTreeMap<String, Metrics> {
    run.per_run.iter().map(|(k, v)| (k.clone(), Metrics::mean(v))).collect()
}
