//! Seeded synthetic check-in data with planted communities, for fixtures
//! and offline runs.
//!
//! Each community has a home area and a few favorite categories; its
//! members mostly visit favorite-category POIs near home and are more
//! likely to be friends with each other.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Duration, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PoiId, RawCheckIn, RawDataset, RawPoi, UserId};
use crate::geo::{haversine, LatLon};

const CATEGORY_NAMES: [&str; 12] = [
    "Gym", "Coffee Shop", "Bar", "Restaurant", "Office", "Park", "Mall", "Subway", "Museum", "Cinema", "Bookstore",
    "Supermarket",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub pois: usize,
    pub categories: usize,
    pub communities: usize,
    pub days: usize,
    /// Chance a user is active on a given day.
    pub active_rate: f64,
    pub min_per_day: usize,
    pub max_per_day: usize,
    /// Share of visits drawn from the community's preferred POIs.
    pub loyalty: f64,
    pub home_radius_km: f64,
    pub friend_in: f64,
    pub friend_out: f64,
    pub center: (f64, f64),
    /// Half-width of the POI box in degrees.
    pub extent_deg: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 50,
            pois: 300,
            categories: 8,
            communities: 5,
            days: 15,
            active_rate: 0.8,
            min_per_day: 3,
            max_per_day: 6,
            loyalty: 0.8,
            home_radius_km: 4.0,
            friend_in: 0.3,
            friend_out: 0.01,
            center: (1.35, 103.82),
            extent_deg: 0.12,
            seed: 7,
        }
    }
}

fn category_name(i: usize) -> String {
    match CATEGORY_NAMES.get(i) {
        Some(n) => n.to_string(),
        None => format!("Category {i}"),
    }
}

/// Community of user `i`.
pub fn community_of(spec: &SyntheticSpec, user: usize) -> usize {
    user % spec.communities.max(1)
}

pub fn generate(spec: &SyntheticSpec) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (clat, clon) = spec.center;
    let pois: Vec<RawPoi> = (0..spec.pois)
        .map(|i| RawPoi {
            poi_id: PoiId(format!("p{i:05}")),
            category: category_name(rng.random_range(0..spec.categories.max(1))),
            lat: clat + rng.random_range(-spec.extent_deg..spec.extent_deg),
            lon: clon + rng.random_range(-spec.extent_deg..spec.extent_deg),
        })
        .collect();

    // Preferred POIs per community: favorite categories near a home POI.
    let communities = spec.communities.max(1);
    let preferred: Vec<Vec<usize>> = (0..communities)
        .map(|_| {
            let home = pois[rng.random_range(0..pois.len())].clone();
            let home_at = LatLon::new(home.lat, home.lon);
            let favs: Vec<String> = (0..2).map(|_| category_name(rng.random_range(0..spec.categories.max(1)))).collect();
            let near: Vec<usize> = (0..pois.len())
                .filter(|&j| haversine(home_at, LatLon::new(pois[j].lat, pois[j].lon)) <= spec.home_radius_km)
                .collect();
            let fav: Vec<usize> = near.iter().copied().filter(|&j| favs.contains(&pois[j].category)).collect();
            if fav.len() >= 3 { fav } else { near }
        })
        .collect();

    let start = Utc.with_ymd_and_hms(2012, 4, 2, 0, 0, 0).unwrap();
    let mut checkins = Vec::new();
    for u in 0..spec.users {
        let user = UserId(format!("u{u:04}"));
        let pref = &preferred[community_of(spec, u)];
        for d in 0..spec.days {
            if !rng.random_bool(spec.active_rate.clamp(0.0, 1.0)) {
                continue;
            }
            let n = rng.random_range(spec.min_per_day..=spec.max_per_day.max(spec.min_per_day));
            // Hours 0..=12 UTC stay on the same local day for offsets up to +11.
            let mut hour = rng.random_range(0..3u32);
            for _ in 0..n {
                let poi = if !pref.is_empty() && rng.random_bool(spec.loyalty.clamp(0.0, 1.0)) {
                    *pref.choose(&mut rng).unwrap()
                } else {
                    rng.random_range(0..pois.len())
                };
                let minute = rng.random_range(0..60u32);
                let ts = start + Duration::days(d as i64) + Duration::hours(hour as i64) + Duration::minutes(minute as i64);
                checkins.push(RawCheckIn { user_id: user.clone(), poi_id: pois[poi].poi_id.clone(), timestamp: ts });
                hour = (hour + rng.random_range(1..3)).min(12);
            }
        }
    }
    checkins.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.user_id.cmp(&b.user_id)));

    let mut social = Vec::new();
    for a in 0..spec.users {
        for b in (a + 1)..spec.users {
            let p = if community_of(spec, a) == community_of(spec, b) { spec.friend_in } else { spec.friend_out };
            if rng.random_bool(p.clamp(0.0, 1.0)) {
                social.push((UserId(format!("u{a:04}")), UserId(format!("u{b:04}"))));
            }
        }
    }
    RawDataset { pois, checkins, social }
}

/// Writes `checkins.tsv`, `pois.tsv`, and `social.tsv` in the ingest format.
pub fn write_tsv(dir: &Path, raw: &RawDataset) -> std::io::Result<[PathBuf; 3]> {
    fs::create_dir_all(dir)?;
    let paths = [dir.join("checkins.tsv"), dir.join("pois.tsv"), dir.join("social.tsv")];
    let mut f = fs::File::create(&paths[0])?;
    for c in &raw.checkins {
        writeln!(f, "{}\t{}\t{}", c.user_id.0, c.poi_id.0, c.timestamp.to_rfc3339())?;
    }
    let mut f = fs::File::create(&paths[1])?;
    for p in &raw.pois {
        writeln!(f, "{}\t{}\t{}\t{}", p.poi_id.0, p.category, p.lat, p.lon)?;
    }
    let mut f = fs::File::create(&paths[2])?;
    for (a, b) in &raw.social {
        writeln!(f, "{}\t{}", a.0, b.0)?;
    }
    Ok(paths)
}
