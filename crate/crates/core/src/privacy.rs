//! Local perturbation mechanisms applied before any user data leaves the
//! device: unary encoding for sequence tokens, Laplace noise for check-in
//! distributions, random flipping for social links, and ⟨ϱ,h⟩ POI
//! fuzzification.
//!
//! Every mechanism is a pure function of its input, its parameters, and the
//! randomness source passed in.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Aspect, AspectViews, Catalog, DistanceBins, SocialGraph, Step, Vocabularies};
use crate::geo::{GeoError, RadiusBounds};

/// Upper bound on fresh (δ, θ) draws when the offset circle holds no POI.
pub const MAX_FUZZ_RETRIES: u32 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("flip probabilities must satisfy 0 < q <= p <= 1, got p={p}, q={q}")]
    BadFlipProbabilities { p: f64, q: f64 },
    #[error("p/q = {ratio} exceeds exp(epsilon) = {bound}")]
    FlipRatio { ratio: f64, bound: f64 },
    #[error("h range must satisfy 1 <= h_min <= h_max, got [{h_min}, {h_max}]")]
    BadHRange { h_min: usize, h_max: usize },
    #[error("radius bounds must satisfy 0 < min <= max, got [{min}, {max}]")]
    BadRadiusBounds { min: f64, max: f64 },
    #[error("record is not one-hot: index {index} outside vocabulary of {size}")]
    NotOneHot { index: usize, size: usize },
    #[error("probability vector sums to {0}, expected 1")]
    NotADistribution(f64),
    #[error("catalog holds no POI at index {0}")]
    UnknownPoi(usize),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

pub fn check_epsilon(epsilon: f64) -> Result<(), PrivacyError> {
    if epsilon.is_finite() && epsilon > 0.0 {
        Ok(())
    } else {
        Err(PrivacyError::BadEpsilon(epsilon))
    }
}

/// Probability that a cold OUE bit is set, which is also the probability
/// that `random_flip` drops the category requirement.
pub fn cold_bit_probability(epsilon: f64) -> f64 {
    1.0 / (epsilon.exp() + 1.0)
}

/// Link-flipping probabilities: an existing link survives with `p`, a
/// missing link appears with `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipParams {
    pub p: f64,
    pub q: f64,
}

impl FlipParams {
    pub fn new(p: f64, q: f64, epsilon: f64) -> Result<Self, PrivacyError> {
        check_epsilon(epsilon)?;
        if !(q > 0.0 && q <= p && p <= 1.0) {
            return Err(PrivacyError::BadFlipProbabilities { p, q });
        }
        let ratio = p / q;
        let bound = epsilon.exp();
        // Tolerate rounding in p and q computed from the same ε.
        if ratio > bound * (1.0 + 1e-12) {
            return Err(PrivacyError::FlipRatio { ratio, bound });
        }
        Ok(Self { p, q })
    }

    /// Randomized response: p = e^ε/(e^ε+1), q = 1/(e^ε+1).
    pub fn randomized_response(epsilon: f64) -> Result<Self, PrivacyError> {
        let q = cold_bit_probability(epsilon);
        Self::new(1.0 - q, q, epsilon)
    }

    /// Keeps the graph as is. Only used when the mechanism is switched off.
    pub fn identity() -> Self {
        Self { p: 1.0, q: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub epsilon: f64,
    pub flip: FlipParams,
    pub h_min: usize,
    pub h_max: usize,
    pub radius_bounds: RadiusBounds,
    pub distance_bins: DistanceBins,
}

impl PrivacyConfig {
    pub fn new(epsilon: f64) -> Result<Self, PrivacyError> {
        let cfg = Self {
            epsilon,
            flip: FlipParams::randomized_response(epsilon)?,
            h_min: 5,
            h_max: 20,
            radius_bounds: RadiusBounds::default(),
            distance_bins: DistanceBins::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        check_epsilon(self.epsilon)?;
        FlipParams::new(self.flip.p, self.flip.q, self.epsilon)?;
        if self.h_min == 0 || self.h_min > self.h_max {
            return Err(PrivacyError::BadHRange { h_min: self.h_min, h_max: self.h_max });
        }
        let RadiusBounds { min_km, max_km } = self.radius_bounds;
        if !(min_km > 0.0 && min_km <= max_km && max_km.is_finite()) {
            return Err(PrivacyError::BadRadiusBounds { min: min_km, max: max_km });
        }
        Ok(())
    }
}

/// Which mechanisms are active. Turning one off passes the corresponding
/// data through untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mechanisms {
    /// Unary encoding of category/region/distance tokens.
    pub sequences: bool,
    /// Laplace noise on distributions and flipping of social links.
    pub distributions: bool,
    /// POI fuzzification of the sequences sent with a recommendation request.
    pub pois: bool,
}

impl Default for Mechanisms {
    fn default() -> Self {
        Self { sequences: true, distributions: true, pois: true }
    }
}

impl Mechanisms {
    pub fn none() -> Self {
        Self { sequences: false, distributions: false, pois: false }
    }
}

/// A token before perturbation: exactly one hot bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotRecord {
    size: usize,
    hot: usize,
}

impl OneHotRecord {
    pub fn new(size: usize, hot: usize) -> Result<Self, PrivacyError> {
        if hot >= size {
            return Err(PrivacyError::NotOneHot { index: hot, size });
        }
        Ok(Self { size, hot })
    }

    /// Accepts an explicit bit vector, rejecting anything but a single set bit.
    pub fn from_bits(bits: &[bool]) -> Result<Self, PrivacyError> {
        let mut set = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i);
        match (set.next(), set.next()) {
            (Some(hot), None) => Ok(Self { size: bits.len(), hot }),
            (Some(_), Some(second)) => Err(PrivacyError::NotOneHot { index: second, size: bits.len() }),
            (None, _) => Err(PrivacyError::NotOneHot { index: bits.len(), size: bits.len() }),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn hot(&self) -> usize {
        self.hot
    }
}

/// A perturbed unary vector; any number of bits may be set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbedBits(pub Vec<bool>);

impl PerturbedBits {
    pub fn set_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }
}

pub fn oue_perturb<R: Rng + ?Sized>(x: &OneHotRecord, epsilon: f64, rng: &mut R) -> Result<PerturbedBits, PrivacyError> {
    check_epsilon(epsilon)?;
    let cold = cold_bit_probability(epsilon);
    let bits = (0..x.size)
        .map(|i| {
            let p = if i == x.hot { 0.5 } else { cold };
            rng.random::<f64>() < p
        })
        .collect();
    Ok(PerturbedBits(bits))
}

/// Uniform choice among the set bits, or over the whole vocabulary when no
/// bit is set.
pub fn decode_perturbed<R: Rng + ?Sized>(bits: &PerturbedBits, rng: &mut R) -> usize {
    let set: Vec<usize> = bits.set_indices().collect();
    if set.is_empty() {
        assert!(!bits.0.is_empty(), "cannot decode an empty vocabulary");
        rng.random_range(0..bits.0.len())
    } else {
        set[rng.random_range(0..set.len())]
    }
}

/// One Laplace(0, `scale`) draw by inverse CDF.
pub fn laplace_noise<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u.abs() < 0.5 {
            return -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// Adds i.i.d. Laplace(1/ε) noise to each coordinate (sensitivity 1). The
/// output is raw: entries may be negative and need not sum to one.
pub fn laplace_perturb<R: Rng + ?Sized>(p: &[f64], epsilon: f64, rng: &mut R) -> Result<Vec<f64>, PrivacyError> {
    check_epsilon(epsilon)?;
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(PrivacyError::NotADistribution(sum));
    }
    let scale = 1.0 / epsilon;
    Ok(p.iter().map(|v| v + laplace_noise(scale, rng)).collect())
}

/// Perturbs each unordered user pair once with a single uniform draw.
pub fn flip_social_links<R: Rng + ?Sized>(graph: &SocialGraph, params: FlipParams, rng: &mut R) -> SocialGraph {
    let n = graph.num_users();
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let phi: f64 = rng.random();
            let keep = if graph.has_edge_idx(i, j) { phi <= params.p } else { phi <= params.q && params.q > 0.0 };
            if keep {
                adjacency[i].push(j as u32);
                adjacency[j].push(i as u32);
            }
        }
    }
    SocialGraph::from_adjacency(graph.users().to_vec(), adjacency)
}

/// Returns `true` ("ignore the category") with probability 1/(e^ε+1).
pub fn random_flip<R: Rng + ?Sized>(epsilon: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < cold_bit_probability(epsilon)
}

/// What one fuzzification drew, for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzTrace {
    pub h: usize,
    pub radius_km: f64,
    pub offset_km: f64,
    pub bearing_rad: f64,
    pub ignore_category: bool,
    pub retries: u32,
    /// No POI was found after all retries and the input was returned.
    pub fell_back: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzOutcome {
    pub poi: usize,
    pub trace: FuzzTrace,
}

/// Replaces the POI at catalog position `poi` with another POI inside a
/// randomly offset circle.
///
/// The input POI itself is only returned when nothing else lies in the
/// circle after all retries, or when the catalog holds it alone.
pub fn fuzzify_poi<R: Rng + ?Sized>(
    poi: usize,
    catalog: &Catalog,
    config: &PrivacyConfig,
    rng: &mut R,
) -> Result<FuzzOutcome, PrivacyError> {
    check_epsilon(config.epsilon)?;
    if poi >= catalog.len() {
        return Err(PrivacyError::UnknownPoi(poi));
    }
    let origin = catalog.poi(poi);
    let at = origin.location();
    let h_hi = config.h_max.min(catalog.len()).max(1);
    let h_lo = config.h_min.min(h_hi).max(1);
    let h = rng.random_range(h_lo..=h_hi);
    let radius = catalog.index().min_radius_containing(at, h, &config.radius_bounds)?;
    let ignore_category = random_flip(config.epsilon, rng);

    let mut trace = FuzzTrace {
        h,
        radius_km: radius,
        offset_km: 0.0,
        bearing_rad: 0.0,
        ignore_category,
        retries: 0,
        fell_back: false,
    };
    for attempt in 0..=MAX_FUZZ_RETRIES {
        trace.retries = attempt;
        trace.offset_km = rng.random_range(0.0..radius);
        trace.bearing_rad = rng.random_range(0.0..TAU);
        let center = at.destination(trace.offset_km, trace.bearing_rad);
        let inside: Vec<usize> = catalog.index().within(center, radius, None).into_iter().filter(|&i| i != poi).collect();
        if inside.is_empty() {
            continue;
        }
        let same: Vec<usize> =
            inside.iter().copied().filter(|&i| catalog.poi(i).category_id == origin.category_id).collect();
        let pool = if !ignore_category && !same.is_empty() { &same } else { &inside };
        let chosen = pool[rng.random_range(0..pool.len())];
        return Ok(FuzzOutcome { poi: chosen, trace });
    }
    trace.fell_back = true;
    Ok(FuzzOutcome { poi, trace })
}

/// Unary-encodes, perturbs, and decodes each token of one aspect view.
/// Timestamps pass through.
pub fn perturb_view<R: Rng + ?Sized>(
    steps: &[Step],
    vocab_size: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<Step>, PrivacyError> {
    steps
        .iter()
        .map(|s| {
            let x = OneHotRecord::new(vocab_size, s.token as usize)?;
            let bits = oue_perturb(&x, epsilon, rng)?;
            Ok(Step { token: decode_perturbed(&bits, rng) as u32, ..*s })
        })
        .collect()
}

/// Perturbs the category, region, and distance views of one sequence.
pub fn perturb_sequences<R: Rng + ?Sized>(
    views: &AspectViews,
    vocab: &Vocabularies,
    epsilon: f64,
    rng: &mut R,
) -> Result<AspectViews, PrivacyError> {
    let mut out = AspectViews::default();
    for aspect in Aspect::ALL {
        *out.get_mut(aspect) = perturb_view(views.get(aspect), vocab.size(aspect), epsilon, rng)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{PoiId, RawPoi, UserId};
    use crate::geo::haversine;
    use chrono::{TimeZone, Utc, Weekday};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn within_sigma(hits: usize, trials: usize, p: f64, k: f64) -> bool {
        let rate = hits as f64 / trials as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        (rate - p).abs() <= k * sigma.max(1e-12)
    }

    #[test]
    fn cold_bit_probabilities() {
        assert!((cold_bit_probability(0.1) - 0.475021).abs() < 1e-6);
        assert!((cold_bit_probability(0.5) - 0.377541).abs() < 1e-6);
        assert!((cold_bit_probability(1.0) - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn oue_rates() {
        for eps in [0.1, 0.5, 1.0] {
            let x = OneHotRecord::new(8, 3).unwrap();
            let mut r = rng(7);
            let trials = 100_000;
            let mut hot = 0;
            let mut cold = 0;
            for _ in 0..trials {
                let b = oue_perturb(&x, eps, &mut r).unwrap();
                hot += b.0[3] as usize;
                cold += b.0[0] as usize;
            }
            assert!(within_sigma(hot, trials, 0.5, 3.0), "eps={eps} hot={hot}");
            assert!(within_sigma(cold, trials, cold_bit_probability(eps), 3.0), "eps={eps} cold={cold}");
        }
    }

    #[test]
    fn oue_high_budget_keeps_cold_bits_off() {
        let x = OneHotRecord::new(2, 0).unwrap();
        let mut r = rng(1);
        let set = (0..100_000).filter(|_| oue_perturb(&x, 50.0, &mut r).unwrap().0[1]).count();
        assert!((set as f64) / 1e5 < 1e-4);
    }

    #[test]
    fn one_hot_validation() {
        assert!(OneHotRecord::new(3, 3).is_err());
        assert!(OneHotRecord::from_bits(&[true, true]).is_err());
        assert!(OneHotRecord::from_bits(&[false, false]).is_err());
        assert_eq!(OneHotRecord::from_bits(&[false, true]).unwrap().hot(), 1);
        assert!(oue_perturb(&OneHotRecord::new(2, 0).unwrap(), 0.0, &mut rng(0)).is_err());
    }

    #[test]
    fn decode_cases() {
        let mut r = rng(3);
        assert_eq!(decode_perturbed(&PerturbedBits(vec![false, false, true]), &mut r), 2);
        let bits = PerturbedBits(vec![false, true, false, true]);
        for _ in 0..1000 {
            let i = decode_perturbed(&bits, &mut r);
            assert!(i == 1 || i == 3);
        }
        let empty = PerturbedBits(vec![false; 4]);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[decode_perturbed(&empty, &mut r)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn laplace_moments() {
        for eps in [0.1, 1.0] {
            let b = 1.0 / eps;
            let mut r = rng(11);
            let n = 1_000_000;
            let xs: Vec<f64> = (0..n).map(|_| laplace_noise(b, &mut r)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var / (2.0 * b * b) - 1.0).abs() < 0.05, "eps={eps} var={var}");
            let sigma = (2.0f64).sqrt() * b / (n as f64).sqrt();
            assert!(mean.abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn laplace_perturb_mean_and_validation() {
        let p = [0.2, 0.3, 0.5];
        let mut r = rng(5);
        let n = 100_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            for (s, v) in sums.iter_mut().zip(laplace_perturb(&p, 1.0, &mut r).unwrap()) {
                *s += v;
            }
        }
        let sigma = (2.0f64).sqrt() / (n as f64).sqrt();
        for (s, want) in sums.iter().zip(p) {
            assert!((s / n as f64 - want).abs() < 3.0 * sigma);
        }
        assert!(laplace_perturb(&[0.5, 0.4], 1.0, &mut r).is_err());
    }

    #[test]
    fn flip_params() {
        let fp = FlipParams::randomized_response(0.5).unwrap();
        assert!((fp.q - 0.377541).abs() < 1e-6);
        assert!(fp.p / fp.q <= 0.5f64.exp() * (1.0 + 1e-12));
        assert!(FlipParams::new(0.9, 0.1, 0.5).is_err());
        assert!(FlipParams::new(0.5, 0.6, 0.5).is_err());
    }

    fn graph(n: usize, edges: &[(usize, usize)]) -> SocialGraph {
        let users: Vec<UserId> = (0..n).map(|i| UserId(format!("u{i:03}"))).collect();
        let e: Vec<(UserId, UserId)> = edges.iter().map(|&(a, b)| (users[a].clone(), users[b].clone())).collect();
        SocialGraph::new(users, &e)
    }

    #[test]
    fn identity_flip() {
        let g = graph(6, &[(0, 1), (2, 3), (1, 5)]);
        assert_eq!(flip_social_links(&g, FlipParams::identity(), &mut rng(0)), g);
    }

    #[test]
    fn flip_creation_rate() {
        let g = graph(450, &[]);
        let fp = FlipParams::randomized_response(0.5).unwrap();
        let out = flip_social_links(&g, fp, &mut rng(9));
        let pairs = 450 * 449 / 2;
        assert!(within_sigma(out.num_edges(), pairs, fp.q, 3.0));
        assert!(out.is_symmetric());
    }

    proptest! {
        #[test]
        fn flip_structure(n in 2usize..30, raw in proptest::collection::vec((0usize..30, 0usize..30), 0..60), seed: u64, eps in 0.05f64..3.0) {
            let edges: Vec<(usize, usize)> = raw.into_iter().map(|(a, b)| (a % n, b % n)).collect();
            let g = graph(n, &edges);
            let fp = FlipParams::randomized_response(eps).unwrap();
            let a = flip_social_links(&g, fp, &mut rng(seed));
            prop_assert!(a.is_symmetric());
            prop_assert_eq!(&a, &flip_social_links(&g, fp, &mut rng(seed)));
        }
    }

    #[test]
    fn random_flip_rates() {
        let mut r = rng(2);
        let n = 100_000;
        let hits = (0..n).filter(|_| random_flip(1.0, &mut r)).count();
        assert!(within_sigma(hits, n, 1.0 / (1.0f64.exp() + 1.0), 3.0));
        let hits = (0..n).filter(|_| random_flip(50.0, &mut r)).count();
        assert!((hits as f64) / (n as f64) < 1e-4);
    }

    fn catalog(points: &[(f64, f64, &str)]) -> Catalog {
        let raw: Vec<RawPoi> = points
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon, c))| RawPoi { poi_id: PoiId(format!("poi-{i:05}")), category: c.into(), lat, lon })
            .collect();
        Catalog::from_raw(&raw, 1.0).unwrap()
    }

    #[test]
    fn single_poi_catalog_returns_itself() {
        let cat = catalog(&[(1.3, 103.8, "Gym")]);
        let cfg = PrivacyConfig::new(1.0).unwrap();
        let out = fuzzify_poi(0, &cat, &cfg, &mut rng(0)).unwrap();
        assert_eq!(out.poi, 0);
        assert!(out.trace.fell_back);
    }

    #[test]
    fn fuzzify_stays_close_and_is_deterministic() {
        let mut r = rng(4);
        let pts: Vec<(f64, f64, &str)> = (0..400)
            .map(|i| (1.2 + r.random::<f64>() * 0.3, 103.6 + r.random::<f64>() * 0.4, if i % 3 == 0 { "A" } else { "B" }))
            .collect();
        let cat = catalog(&pts);
        let cfg = PrivacyConfig::new(0.5).unwrap();
        for i in 0..500 {
            let l = i % cat.len();
            let out = fuzzify_poi(l, &cat, &cfg, &mut r).unwrap();
            assert!(out.poi < cat.len());
            assert!(haversine(cat.poi(l).location(), cat.poi(out.poi).location()) <= 60.0);
            assert!((10.0..=30.0).contains(&out.trace.radius_km));
            assert!(out.trace.offset_km < out.trace.radius_km);
        }
        let a = fuzzify_poi(7, &cat, &cfg, &mut rng(99)).unwrap();
        let b = fuzzify_poi(7, &cat, &cfg, &mut rng(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_view_shape_and_bins() {
        let t = Utc.with_ymd_and_hms(2012, 4, 2, 8, 0, 0).unwrap();
        let steps: Vec<Step> = (0..6).map(|i| Step { token: i % 4, timestamp: t, day: Weekday::Mon, hour: 8 }).collect();
        let out = perturb_view(&steps, 4, 0.1, &mut rng(0)).unwrap();
        assert_eq!(out.len(), steps.len());
        assert!(out.iter().zip(&steps).all(|(a, b)| a.timestamp == b.timestamp && a.token < 4));
        // With cold bits silent, the token survives when the hot bit is kept
        // (1/2) or when the empty vector decodes back to it (1/2 * 1/|V|).
        let long: Vec<Step> = steps.iter().cycle().take(20_000).copied().collect();
        let out = perturb_view(&long, 4, 50.0, &mut rng(0)).unwrap();
        let agree = out.iter().zip(&long).filter(|(a, b)| a.token == b.token).count();
        assert!(within_sigma(agree, long.len(), 0.5 + 0.5 / 4.0, 3.0), "{agree}");
        assert_eq!(DistanceBins::default().bin(3.2), 3);
    }

    #[test]
    fn config_validation() {
        let mut c = PrivacyConfig::new(1.0).unwrap();
        c.h_min = 0;
        assert!(c.validate().is_err());
        c.h_min = 21;
        assert!(c.validate().is_err());
        assert!(PrivacyConfig::new(-1.0).is_err());
    }
}
