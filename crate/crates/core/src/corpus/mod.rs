//! Check-in corpus: ingestion, 5-core filtering, daily sequences, and the
//! chronological train/validation/test split.

mod ingest;
mod store;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, Timelike, Utc, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine, IndexedPoint, LatLon, RegionGrid, SpatialIndex};

pub use ingest::{ingest, parse_checkins, parse_pois, parse_social, parse_timestamp};
pub use store::{read_dataset, read_ndjson, write_dataset, write_ndjson, DatasetManifest};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: {reason}")]
    Malformed { file: String, line: usize, reason: String },
    #[error("check-ins reference unknown POIs: {}", .0.join(", "))]
    UnknownPoi(Vec<String>),
    #[error("duplicate POI id {0}")]
    DuplicatePoi(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoiId(pub String);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for PoiId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_string())
    }
}

impl From<&str> for PoiId {
    fn from(s: &str) -> Self {
        PoiId(s.to_string())
    }
}

/// POI row as read from the POI file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPoi {
    pub poi_id: PoiId,
    pub category: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCheckIn {
    pub user_id: UserId,
    pub poi_id: PoiId,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawDataset {
    pub pois: Vec<RawPoi>,
    pub checkins: Vec<RawCheckIn>,
    pub social: Vec<(UserId, UserId)>,
}

impl RawDataset {
    pub fn num_users(&self) -> usize {
        self.checkins.iter().map(|c| &c.user_id).collect::<HashSet<_>>().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiEntry {
    pub poi_id: PoiId,
    pub category_id: u32,
    pub lat: f64,
    pub lon: f64,
    pub region_id: u32,
}

impl PoiEntry {
    pub fn location(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

/// The aspects a check-in is viewed through when talking to the LLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Category,
    Region,
    Distance,
}

impl Aspect {
    pub const ALL: [Aspect; 3] = [Aspect::Category, Aspect::Region, Aspect::Distance];

    pub fn name(self) -> &'static str {
        match self {
            Aspect::Category => "category",
            Aspect::Region => "region",
            Aspect::Distance => "distance",
        }
    }

    pub fn parse(s: &str) -> Option<Aspect> {
        match s.trim().to_ascii_lowercase().as_str() {
            "category" | "categories" => Some(Aspect::Category),
            "region" | "regions" => Some(Aspect::Region),
            "distance" | "distances" => Some(Aspect::Distance),
            _ => None,
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered distance-bin edges in km. `k` edges give `k + 1` bins; a distance
/// falls into the bin equal to the number of edges that are `<=` it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistanceBins(Vec<f64>);

impl Default for DistanceBins {
    fn default() -> Self {
        DistanceBins(vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0])
    }
}

impl DistanceBins {
    pub fn new(edges: Vec<f64>) -> Option<Self> {
        let increasing = edges.windows(2).all(|w| w[0] < w[1]);
        let positive = edges.iter().all(|e| e.is_finite() && *e > 0.0);
        (increasing && positive).then_some(DistanceBins(edges))
    }

    pub fn edges(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bin(&self, km: f64) -> u32 {
        self.0.partition_point(|&e| e <= km) as u32
    }

    pub fn label(&self, bin: u32) -> String {
        let e = &self.0;
        let b = bin as usize;
        if e.is_empty() {
            return "any".into();
        }
        if b == 0 {
            format!("<{}km", fmt_km(e[0]))
        } else if b >= e.len() {
            format!(">{}km", fmt_km(e[e.len() - 1]))
        } else {
            format!("{}-{}km", fmt_km(e[b - 1]), fmt_km(e[b]))
        }
    }
}

fn fmt_km(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Token vocabularies for the three aspects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub categories: Vec<String>,
    pub num_regions: u32,
    pub distance_bins: DistanceBins,
}

impl Vocabularies {
    pub fn size(&self, aspect: Aspect) -> usize {
        match aspect {
            Aspect::Category => self.categories.len(),
            Aspect::Region => self.num_regions as usize,
            Aspect::Distance => self.distance_bins.len(),
        }
    }

    pub fn label(&self, aspect: Aspect, token: u32) -> String {
        match aspect {
            Aspect::Category => self
                .categories
                .get(token as usize)
                .cloned()
                .unwrap_or_else(|| format!("category#{token}")),
            Aspect::Region => region_label(token),
            Aspect::Distance => self.distance_bins.label(token),
        }
    }
}

/// Opaque prompt label for a region id: `r1`, `r2`, ...
pub fn region_label(region_id: u32) -> String {
    format!("r{}", region_id as u64 + 1)
}

/// POI catalog with category vocabulary, region grid, and spatial index.
#[derive(Debug, Clone)]
pub struct Catalog {
    pois: Vec<PoiEntry>,
    categories: Vec<String>,
    grid: RegionGrid,
    by_id: HashMap<PoiId, usize>,
    index: SpatialIndex,
}

impl Catalog {
    /// Builds a catalog from raw POIs; categories are numbered in sorted
    /// name order and regions come from a `cell_km` grid over the POIs.
    pub fn from_raw(raw: &[RawPoi], cell_km: f64) -> Result<Self, CorpusError> {
        let categories: Vec<String> = raw
            .iter()
            .map(|p| p.category.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let grid = RegionGrid::covering(raw.iter().map(|p| LatLon::new(p.lat, p.lon)), cell_km)
            .unwrap_or_else(|| RegionGrid::with_steps(0.0, 0.0, 1.0, 1.0, 1, 1));
        let cat_ids: HashMap<&str, u32> =
            categories.iter().enumerate().map(|(i, c)| (c.as_str(), i as u32)).collect();
        let pois = raw
            .iter()
            .map(|p| PoiEntry {
                poi_id: p.poi_id.clone(),
                category_id: cat_ids[p.category.as_str()],
                lat: p.lat,
                lon: p.lon,
                region_id: grid.assign_region(LatLon::new(p.lat, p.lon)),
            })
            .collect();
        Self::from_parts(pois, categories, grid)
    }

    pub fn from_parts(pois: Vec<PoiEntry>, categories: Vec<String>, grid: RegionGrid) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(pois.len());
        for (i, p) in pois.iter().enumerate() {
            if by_id.insert(p.poi_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicatePoi(p.poi_id.0.clone()));
            }
        }
        let index = SpatialIndex::new(
            pois.iter().map(|p| IndexedPoint { at: p.location(), category: p.category_id }).collect(),
        );
        Ok(Self { pois, categories, grid, by_id, index })
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn pois(&self) -> &[PoiEntry] {
        &self.pois
    }

    pub fn poi(&self, idx: usize) -> &PoiEntry {
        &self.pois[idx]
    }

    pub fn position(&self, id: &PoiId) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn get(&self, id: &PoiId) -> Option<&PoiEntry> {
        self.position(id).map(|i| &self.pois[i])
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_name(&self, id: u32) -> &str {
        &self.categories[id as usize]
    }

    pub fn grid(&self) -> &RegionGrid {
        &self.grid
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    pub fn vocabularies(&self, distance_bins: DistanceBins) -> Vocabularies {
        Vocabularies { categories: self.categories.clone(), num_regions: self.grid.num_cells(), distance_bins }
    }
}

/// One visit with its derived calendar, category, region, and distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckInRecord {
    pub user_id: UserId,
    pub poi_id: PoiId,
    pub timestamp: DateTime<Utc>,
    pub day_of_week: Weekday,
    pub hour_of_day: u8,
    pub category_id: u32,
    pub region_id: u32,
    pub distance_km: f64,
}

pub type DailySequence = Vec<CheckInRecord>;

/// One element of a single-aspect projection of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub token: u32,
    pub timestamp: DateTime<Utc>,
    pub day: Weekday,
    pub hour: u8,
}

pub fn project(seq: &[CheckInRecord], aspect: Aspect, bins: &DistanceBins) -> Vec<Step> {
    seq.iter()
        .map(|r| Step {
            token: match aspect {
                Aspect::Category => r.category_id,
                Aspect::Region => r.region_id,
                Aspect::Distance => bins.bin(r.distance_km),
            },
            timestamp: r.timestamp,
            day: r.day_of_week,
            hour: r.hour_of_day,
        })
        .collect()
}

/// Category, region, and binned-distance projections of one sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AspectViews {
    pub category: Vec<Step>,
    pub region: Vec<Step>,
    pub distance: Vec<Step>,
}

impl AspectViews {
    pub fn from_sequence(seq: &[CheckInRecord], bins: &DistanceBins) -> Self {
        Self {
            category: project(seq, Aspect::Category, bins),
            region: project(seq, Aspect::Region, bins),
            distance: project(seq, Aspect::Distance, bins),
        }
    }

    pub fn get(&self, aspect: Aspect) -> &[Step] {
        match aspect {
            Aspect::Category => &self.category,
            Aspect::Region => &self.region,
            Aspect::Distance => &self.distance,
        }
    }

    pub fn get_mut(&mut self, aspect: Aspect) -> &mut Vec<Step> {
        match aspect {
            Aspect::Category => &mut self.category,
            Aspect::Region => &mut self.region,
            Aspect::Distance => &mut self.distance,
        }
    }

    pub fn len(&self) -> usize {
        self.category.len()
    }

    pub fn is_empty(&self) -> bool {
        self.category.is_empty()
    }
}

/// A user's daily sequences: everything before the most recent day is
/// history, the most recent day is current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequences {
    pub user_id: UserId,
    pub history: Vec<DailySequence>,
    pub current: DailySequence,
}

impl UserSequences {
    pub fn all(&self) -> impl Iterator<Item = &DailySequence> {
        self.history.iter().chain(std::iter::once(&self.current))
    }

    pub fn num_sequences(&self) -> usize {
        self.history.len() + 1
    }

    fn from_sequences(user_id: UserId, mut seqs: Vec<DailySequence>) -> Option<Self> {
        let current = seqs.pop()?;
        Some(Self { user_id, history: seqs, current })
    }
}

/// Undirected simple graph over a fixed, sorted user set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialGraph {
    users: Vec<UserId>,
    adjacency: Vec<Vec<u32>>,
}

impl SocialGraph {
    /// Keeps edges whose endpoints are both in `users`; self-loops and
    /// duplicates are dropped.
    pub fn new(users: impl IntoIterator<Item = UserId>, edges: &[(UserId, UserId)]) -> Self {
        let mut users: Vec<UserId> = users.into_iter().collect();
        users.sort();
        users.dedup();
        let pos: HashMap<&UserId, u32> = users.iter().enumerate().map(|(i, u)| (u, i as u32)).collect();
        let mut adjacency = vec![Vec::new(); users.len()];
        for (a, b) in edges {
            if let (Some(&i), Some(&j)) = (pos.get(a), pos.get(b)) {
                if i != j {
                    adjacency[i as usize].push(j);
                    adjacency[j as usize].push(i);
                }
            }
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }
        Self { users, adjacency }
    }

    pub(crate) fn from_adjacency(users: Vec<UserId>, adjacency: Vec<Vec<u32>>) -> Self {
        Self { users, adjacency }
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn index_of(&self, u: &UserId) -> Option<usize> {
        self.users.binary_search(u).ok()
    }

    pub fn has_edge_idx(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&(j as u32)).is_ok()
    }

    pub fn has_edge(&self, a: &UserId, b: &UserId) -> bool {
        match (self.index_of(a), self.index_of(b)) {
            (Some(i), Some(j)) => self.has_edge_idx(i, j),
            _ => false,
        }
    }

    pub fn neighbors(&self, u: &UserId) -> Vec<UserId> {
        self.index_of(u)
            .map(|i| self.adjacency[i].iter().map(|&j| self.users[j as usize].clone()).collect())
            .unwrap_or_default()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `(lower, higher)` user pairs.
    pub fn edges(&self) -> Vec<(UserId, UserId)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for (i, adj) in self.adjacency.iter().enumerate() {
            for &j in adj.iter().filter(|&&j| j as usize > i) {
                out.push((self.users[i].clone(), self.users[j as usize].clone()));
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency
            .iter()
            .enumerate()
            .all(|(i, adj)| adj.iter().all(|&j| j as usize != i && self.has_edge_idx(j as usize, i)))
    }
}

/// Keeps only users and POIs with at least `k` check-ins, iterating until no
/// further pruning happens. POIs and social edges are restricted to what
/// survives.
pub fn k_core_filter(dataset: &RawDataset, k: usize) -> RawDataset {
    let mut checkins: Vec<&RawCheckIn> = dataset.checkins.iter().collect();
    loop {
        let mut per_user: HashMap<&UserId, usize> = HashMap::new();
        let mut per_poi: HashMap<&PoiId, usize> = HashMap::new();
        for c in &checkins {
            *per_user.entry(&c.user_id).or_default() += 1;
            *per_poi.entry(&c.poi_id).or_default() += 1;
        }
        let before = checkins.len();
        checkins.retain(|c| per_user[&c.user_id] >= k && per_poi[&c.poi_id] >= k);
        if checkins.len() == before {
            break;
        }
    }
    let users: HashSet<&UserId> = checkins.iter().map(|c| &c.user_id).collect();
    let pois: HashSet<&PoiId> = checkins.iter().map(|c| &c.poi_id).collect();
    RawDataset {
        pois: dataset.pois.iter().filter(|p| pois.contains(&p.poi_id)).cloned().collect(),
        social: dataset
            .social
            .iter()
            .filter(|(a, b)| users.contains(a) && users.contains(b))
            .cloned()
            .collect(),
        checkins: checkins.into_iter().cloned().collect(),
    }
}

pub fn five_core_filter(dataset: &RawDataset) -> RawDataset {
    k_core_filter(dataset, 5)
}

/// Derives calendar fields, category, region, and inter-visit distance for
/// one daily sequence of visits. The first visit of the day has distance 0.
pub fn derive_aux_sequences(
    user: &UserId,
    visits: &[(PoiId, DateTime<Utc>)],
    catalog: &Catalog,
    offset: FixedOffset,
) -> Result<DailySequence, CorpusError> {
    let missing: Vec<String> =
        visits.iter().filter(|(p, _)| catalog.get(p).is_none()).map(|(p, _)| p.0.clone()).collect();
    if !missing.is_empty() {
        return Err(CorpusError::UnknownPoi(missing));
    }
    let mut prev: Option<LatLon> = None;
    Ok(visits
        .iter()
        .map(|(poi_id, ts)| {
            let poi = catalog.get(poi_id).expect("checked above");
            let local = ts.with_timezone(&offset);
            let here = poi.location();
            let distance_km = prev.map_or(0.0, |p| haversine(p, here));
            prev = Some(here);
            CheckInRecord {
                user_id: user.clone(),
                poi_id: poi_id.clone(),
                timestamp: *ts,
                day_of_week: local.weekday(),
                hour_of_day: local.hour() as u8,
                category_id: poi.category_id,
                region_id: poi.region_id,
                distance_km,
            }
        })
        .collect())
}

/// Splits every user's check-ins on local calendar days and drops users with
/// fewer than `min_sequences` days. Users come back sorted by id.
pub fn build_daily_sequences(
    dataset: &RawDataset,
    catalog: &Catalog,
    offset: FixedOffset,
    min_sequences: usize,
) -> Result<Vec<UserSequences>, CorpusError> {
    let mut by_user: BTreeMap<&UserId, Vec<&RawCheckIn>> = BTreeMap::new();
    for c in &dataset.checkins {
        by_user.entry(&c.user_id).or_default().push(c);
    }
    let mut out = Vec::new();
    for (user, mut visits) in by_user {
        visits.sort_by_key(|c| c.timestamp);
        let mut days: BTreeMap<NaiveDate, Vec<(PoiId, DateTime<Utc>)>> = BTreeMap::new();
        for c in visits {
            let day = c.timestamp.with_timezone(&offset).date_naive();
            days.entry(day).or_default().push((c.poi_id.clone(), c.timestamp));
        }
        if days.len() < min_sequences.max(1) {
            continue;
        }
        let seqs = days
            .values()
            .map(|v| derive_aux_sequences(user, v, catalog, offset))
            .collect::<Result<Vec<_>, _>>()?;
        out.extend(UserSequences::from_sequences(user.clone(), seqs));
    }
    Ok(out)
}

/// One evaluation target: the day's check-ins before the last one, and the
/// last one itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub user_id: UserId,
    pub context: DailySequence,
    pub truth: CheckInRecord,
}

impl EvalInstance {
    fn from_sequence(mut seq: DailySequence) -> Option<Self> {
        let truth = seq.pop()?;
        Some(Self { user_id: truth.user_id.clone(), context: seq, truth })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: UserId,
    pub train: Vec<DailySequence>,
    pub validation: Vec<EvalInstance>,
    pub test: Vec<EvalInstance>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub users: Vec<UserSplit>,
}

impl DatasetSplit {
    pub fn test_instances(&self) -> impl Iterator<Item = &EvalInstance> {
        self.users.iter().flat_map(|u| u.test.iter())
    }

    pub fn validation_instances(&self) -> impl Iterator<Item = &EvalInstance> {
        self.users.iter().flat_map(|u| u.validation.iter())
    }

    pub fn train_checkins(&self) -> impl Iterator<Item = &CheckInRecord> {
        self.users.iter().flat_map(|u| u.train.iter().flatten())
    }
}

/// Sizes of the (train, validation, test) buckets for `n` sequences:
/// validation and test each get `max(1, floor(n / 10))`, train gets the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let tail = (n / 10).max(1);
    if n < 3 {
        // Not enough to fill every bucket; keep what we have for training.
        return (n, 0, 0);
    }
    (n - 2 * tail, tail, tail)
}

pub fn chronological_split(users: &[UserSequences]) -> DatasetSplit {
    let users = users
        .iter()
        .map(|u| {
            let seqs: Vec<DailySequence> = u.all().cloned().collect();
            let (tr, va, _) = split_sizes(seqs.len());
            let mut it = seqs.into_iter();
            let train: Vec<_> = it.by_ref().take(tr).collect();
            let validation: Vec<_> = it.by_ref().take(va).filter_map(EvalInstance::from_sequence).collect();
            let test: Vec<_> = it.filter_map(EvalInstance::from_sequence).collect();
            UserSplit { user_id: u.user_id.clone(), train, validation, test }
        })
        .collect();
    DatasetSplit { users }
}

/// Preprocessing knobs recorded in the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub core_k: usize,
    pub min_sequences: usize,
    pub utc_offset_minutes: i32,
    pub region_cell_km: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { core_k: 5, min_sequences: 3, utc_offset_minutes: 0, region_cell_km: 1.0 }
    }
}

impl PreprocessConfig {
    /// Defaults with the local clock of a known city (`SIN`, `NY`, `PHO`).
    pub fn for_city(city: &str) -> Option<Self> {
        let minutes = match city.to_ascii_uppercase().as_str() {
            "SIN" => 8 * 60,
            "NY" | "NYC" => -5 * 60,
            "PHO" => -7 * 60,
            _ => return None,
        };
        Some(Self { utc_offset_minutes: minutes, ..Self::default() })
    }

    pub fn offset(&self) -> FixedOffset {
        FixedOffset::east_opt(self.utc_offset_minutes * 60).unwrap_or(FixedOffset::east_opt(0).unwrap())
    }
}

/// A preprocessed dataset: catalog, per-user daily sequences, social graph.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: Catalog,
    pub users: Vec<UserSequences>,
    pub social: SocialGraph,
    pub config: PreprocessConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub pois: usize,
    pub checkins: usize,
    pub categories: usize,
}

impl Dataset {
    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            users: self.users.len(),
            pois: self.catalog.len(),
            checkins: self.users.iter().flat_map(|u| u.all()).map(Vec::len).sum(),
            categories: self.catalog.categories().len(),
        }
    }
}

/// k-core filter, catalog construction, daily sequences, social restriction.
pub fn preprocess(raw: &RawDataset, config: &PreprocessConfig) -> Result<Dataset, CorpusError> {
    let filtered = k_core_filter(raw, config.core_k);
    let catalog = Catalog::from_raw(&filtered.pois, config.region_cell_km)?;
    let users = build_daily_sequences(&filtered, &catalog, config.offset(), config.min_sequences)?;
    let social = SocialGraph::new(users.iter().map(|u| u.user_id.clone()), &filtered.social);
    Ok(Dataset { catalog, users, social, config: config.clone() })
}
