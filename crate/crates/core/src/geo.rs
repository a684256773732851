//! Great-circle distances, region grids, and a bucketed spatial index over
//! the POI catalog.
//!
//! All distances are haversine on a sphere of radius [`EARTH_RADIUS_KM`].
//! Index queries are exact: buckets only prune candidates, and every
//! candidate is re-checked against the true haversine distance.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Length of one degree of latitude (and of longitude at the equator).
pub const KM_PER_DEGREE: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("requested the {requested}-th nearest POI but the index holds only {available}")]
    NotEnoughPois { requested: usize, available: usize },
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("spatial index is empty")]
    EmptyIndex,
    #[error("coordinate out of range: lat={lat}, lon={lon}")]
    OutOfRange { lat: f64, lon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn checked(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::OutOfRange { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    /// Point reached by travelling `distance_km` from `self` along the
    /// initial bearing `bearing_rad` (clockwise from north).
    pub fn destination(&self, distance_km: f64, bearing_rad: f64) -> LatLon {
        let angular = distance_km / EARTH_RADIUS_KM;
        let lat1 = self.lat.to_radians();
        let lon1 = self.lon.to_radians();
        let lat2 = (lat1.sin() * angular.cos() + lat1.cos() * angular.sin() * bearing_rad.cos())
            .clamp(-1.0, 1.0)
            .asin();
        let lon2 = lon1
            + (bearing_rad.sin() * angular.sin() * lat1.cos())
                .atan2(angular.cos() - lat1.sin() * lat2.sin());
        let mut lon_deg = lon2.to_degrees();
        if lon_deg > 180.0 {
            lon_deg -= 360.0;
        } else if lon_deg < -180.0 {
            lon_deg += 360.0;
        }
        LatLon::new(lat2.to_degrees(), lon_deg)
    }
}

/// Great-circle distance in km.
pub fn haversine(a: LatLon, b: LatLon) -> f64 {
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2)
        + a.lat.to_radians().cos() * b.lat.to_radians().cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Fixed square-ish grid over a bounding box. Cell `(row, col)` covers the
/// half-open ranges `[min + k*step, min + (k+1)*step)`; points on a shared
/// edge fall into the cell that starts there, and points outside the box are
/// clamped into the border cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub min_lat: f64,
    pub min_lon: f64,
    pub lat_step: f64,
    pub lon_step: f64,
    pub rows: u32,
    pub cols: u32,
}

impl RegionGrid {
    /// Grid with explicit degree steps, mostly useful for fixtures.
    pub fn with_steps(min_lat: f64, min_lon: f64, lat_step: f64, lon_step: f64, rows: u32, cols: u32) -> Self {
        assert!(lat_step > 0.0 && lon_step > 0.0 && rows > 0 && cols > 0);
        Self { min_lat, min_lon, lat_step, lon_step, rows, cols }
    }

    /// Grid of `cell_km` cells covering the bounding box of `points`.
    /// Longitude steps are scaled by the cosine of the box's mid latitude.
    pub fn covering<I: IntoIterator<Item = LatLon>>(points: I, cell_km: f64) -> Option<Self> {
        assert!(cell_km > 0.0, "cell edge must be positive");
        let mut bbox: Option<(f64, f64, f64, f64)> = None;
        for p in points {
            bbox = Some(match bbox {
                None => (p.lat, p.lon, p.lat, p.lon),
                Some((a, b, c, d)) => (a.min(p.lat), b.min(p.lon), c.max(p.lat), d.max(p.lon)),
            });
        }
        let (min_lat, min_lon, max_lat, max_lon) = bbox?;
        let mid = ((min_lat + max_lat) / 2.0).to_radians().cos().max(1e-6);
        let lat_step = cell_km / KM_PER_DEGREE;
        let lon_step = cell_km / (KM_PER_DEGREE * mid);
        let rows = (((max_lat - min_lat) / lat_step).floor() as u32 + 1).max(1);
        let cols = (((max_lon - min_lon) / lon_step).floor() as u32 + 1).max(1);
        Some(Self { min_lat, min_lon, lat_step, lon_step, rows, cols })
    }

    pub fn num_cells(&self) -> u32 {
        self.rows * self.cols
    }

    pub fn cell_of(&self, p: LatLon) -> (u32, u32) {
        let clamp = |offset: f64, step: f64, n: u32| -> u32 {
            let k = (offset / step).floor();
            if k < 0.0 {
                0
            } else {
                (k as u64).min(n as u64 - 1) as u32
            }
        };
        (
            clamp(p.lat - self.min_lat, self.lat_step, self.rows),
            clamp(p.lon - self.min_lon, self.lon_step, self.cols),
        )
    }

    /// Region id of a point: row-major cell index.
    pub fn assign_region(&self, p: LatLon) -> u32 {
        let (r, c) = self.cell_of(p);
        r * self.cols + c
    }
}

/// Lower/upper clamp for fuzzification radii.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusBounds {
    pub min_km: f64,
    pub max_km: f64,
}

impl Default for RadiusBounds {
    fn default() -> Self {
        Self { min_km: 10.0, max_km: 30.0 }
    }
}

impl RadiusBounds {
    pub fn clamp(&self, km: f64) -> f64 {
        km.clamp(self.min_km, self.max_km)
    }
}

/// One indexed point: its position and category. The index hands back
/// positions into the slice it was built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexedPoint {
    pub at: LatLon,
    pub category: u32,
}

/// Grid-bucket index over lat/lon. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<IndexedPoint>,
    bucket_deg: f64,
    buckets: HashMap<(i32, i32), Vec<usize>>,
}

const DEFAULT_BUCKET_DEG: f64 = 0.05;

impl SpatialIndex {
    pub fn new(points: Vec<IndexedPoint>) -> Self {
        Self::with_bucket_size(points, DEFAULT_BUCKET_DEG)
    }

    pub fn with_bucket_size(points: Vec<IndexedPoint>, bucket_deg: f64) -> Self {
        assert!(bucket_deg > 0.0);
        let mut buckets: HashMap<(i32, i32), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(bucket_key(p.at, bucket_deg)).or_default().push(i);
        }
        Self { points, bucket_deg, buckets }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &IndexedPoint {
        &self.points[i]
    }

    /// Indices of all points within `radius_km` of `center` (inclusive),
    /// optionally restricted to one category, in ascending index order.
    pub fn within(&self, center: LatLon, radius_km: f64, category: Option<u32>) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_candidate(center, radius_km, |i| {
            let p = &self.points[i];
            if category.is_some_and(|c| c != p.category) {
                return;
            }
            if haversine(center, p.at) <= radius_km {
                out.push(i);
            }
        });
        out.sort_unstable();
        out
    }

    /// Distance to the `k`-th nearest point (1-based).
    pub fn kth_nearest_distance(&self, center: LatLon, k: usize) -> Result<f64, GeoError> {
        if k == 0 {
            return Err(GeoError::ZeroCount);
        }
        if self.points.is_empty() {
            return Err(GeoError::EmptyIndex);
        }
        if k > self.points.len() {
            return Err(GeoError::NotEnoughPois { requested: k, available: self.points.len() });
        }
        let mut radius = 1.0;
        loop {
            let mut dists = Vec::new();
            self.for_each_candidate(center, radius, |i| {
                let d = haversine(center, self.points[i].at);
                if d <= radius {
                    dists.push(d);
                }
            });
            if dists.len() >= k {
                dists.sort_by(f64::total_cmp);
                return Ok(dists[k - 1]);
            }
            if radius > std::f64::consts::PI * EARTH_RADIUS_KM {
                // Whole sphere covered; cannot happen when k <= len.
                unreachable!("k-th nearest search exceeded the sphere");
            }
            radius *= 2.0;
        }
    }

    /// Radius of the smallest circle around `center` holding at least `h`
    /// points, clamped into `bounds`.
    pub fn min_radius_containing(&self, center: LatLon, h: usize, bounds: &RadiusBounds) -> Result<f64, GeoError> {
        Ok(bounds.clamp(self.kth_nearest_distance(center, h)?))
    }

    fn for_each_candidate<F: FnMut(usize)>(&self, center: LatLon, radius_km: f64, mut f: F) {
        let angular = radius_km / EARTH_RADIUS_KM;
        let lat_lo = center.lat - angular.to_degrees();
        let lat_hi = center.lat + angular.to_degrees();
        // A pole inside the circle, or a circle wider than a hemisphere,
        // makes the longitude band unbounded.
        let full_lon = lat_lo <= -90.0 || lat_hi >= 90.0 || angular >= std::f64::consts::FRAC_PI_2;
        let (lon_lo, lon_hi) = if full_lon {
            (-180.0, 180.0)
        } else {
            let ratio = (angular.sin() / center.lat.to_radians().cos()).min(1.0);
            let dlon = ratio.asin().to_degrees();
            (center.lon - dlon, center.lon + dlon)
        };
        let wraps = lon_lo < -180.0 || lon_hi > 180.0;
        let row_lo = (lat_lo.max(-90.0) / self.bucket_deg).floor() as i64;
        let row_hi = (lat_hi.min(90.0) / self.bucket_deg).floor() as i64;
        let (col_lo, col_hi) = if wraps || full_lon {
            ((-180.0 / self.bucket_deg).floor() as i64, (180.0 / self.bucket_deg).floor() as i64)
        } else {
            ((lon_lo / self.bucket_deg).floor() as i64, (lon_hi / self.bucket_deg).floor() as i64)
        };
        let span = (row_hi - row_lo + 1) as u128 * (col_hi - col_lo + 1) as u128;
        if span > self.buckets.len() as u128 {
            for (&(r, c), idx) in &self.buckets {
                let (r, c) = (r as i64, c as i64);
                if (row_lo..=row_hi).contains(&r) && (col_lo..=col_hi).contains(&c) {
                    idx.iter().for_each(|&i| f(i));
                }
            }
        } else {
            for r in row_lo..=row_hi {
                for c in col_lo..=col_hi {
                    if let Some(idx) = self.buckets.get(&(r as i32, c as i32)) {
                        idx.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }
}

fn bucket_key(p: LatLon, bucket_deg: f64) -> (i32, i32) {
    ((p.lat / bucket_deg).floor() as i32, (p.lon / bucket_deg).floor() as i32)
}
