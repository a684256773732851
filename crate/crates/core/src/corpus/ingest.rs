//! TSV readers for check-in, POI, and social-edge files.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};

use super::{CorpusError, PoiId, RawCheckIn, RawDataset, RawPoi, UserId};

/// Parses `ISO-8601`/RFC 3339 instants, naive `YYYY-MM-DD[T ]HH:MM:SS`
/// (taken as UTC), integer epoch seconds, and the Foursquare dump format
/// `Tue Apr 03 18:00:09 +0000 2012`.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(secs) = s.parse::<i64>() {
        return Utc.timestamp_opt(secs, 0).single();
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    DateTime::parse_from_str(s, "%a %b %d %H:%M:%S %z %Y").ok().map(|t| t.with_timezone(&Utc))
}

fn rows<R: Read>(reader: R, file: &str) -> impl Iterator<Item = Result<(usize, Vec<String>), CorpusError>> {
    let file = file.to_string();
    BufReader::new(reader).lines().enumerate().filter_map(move |(i, line)| {
        let line_no = i + 1;
        match line {
            Err(e) => Some(Err(CorpusError::Io { path: format!("{file}:{line_no}"), source: e })),
            Ok(l) if l.trim().is_empty() || l.starts_with('#') => None,
            Ok(l) => Some(Ok((line_no, l.trim_end_matches('\r').split('\t').map(|f| f.trim().to_string()).collect()))),
        }
    })
}

fn malformed(file: &str, line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::Malformed { file: file.to_string(), line, reason: reason.into() }
}

pub fn parse_checkins<R: Read>(reader: R, file: &str) -> Result<Vec<RawCheckIn>, CorpusError> {
    let mut out = Vec::new();
    for row in rows(reader, file) {
        let (line, f) = row?;
        if f.len() < 3 {
            return Err(malformed(file, line, format!("expected 3 columns, found {}", f.len())));
        }
        if f[0].is_empty() || f[1].is_empty() {
            return Err(malformed(file, line, "empty user or POI id"));
        }
        let timestamp = parse_timestamp(&f[2]).ok_or_else(|| malformed(file, line, format!("bad timestamp {:?}", f[2])))?;
        out.push(RawCheckIn { user_id: UserId(f[0].clone()), poi_id: PoiId(f[1].clone()), timestamp });
    }
    // Stable: same-instant check-ins keep file order.
    out.sort_by_key(|c| c.timestamp);
    Ok(out)
}

pub fn parse_pois<R: Read>(reader: R, file: &str) -> Result<Vec<RawPoi>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for row in rows(reader, file) {
        let (line, f) = row?;
        if f.len() < 4 {
            return Err(malformed(file, line, format!("expected 4 columns, found {}", f.len())));
        }
        let lat: f64 = f[2].parse().map_err(|_| malformed(file, line, format!("bad latitude {:?}", f[2])))?;
        let lon: f64 = f[3].parse().map_err(|_| malformed(file, line, format!("bad longitude {:?}", f[3])))?;
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(malformed(file, line, format!("coordinate out of range ({lat}, {lon})")));
        }
        if f[1].is_empty() {
            return Err(malformed(file, line, "empty category"));
        }
        if !seen.insert(f[0].clone()) {
            return Err(CorpusError::DuplicatePoi(f[0].clone()));
        }
        out.push(RawPoi { poi_id: PoiId(f[0].clone()), category: f[1].clone(), lat, lon });
    }
    Ok(out)
}

pub fn parse_social<R: Read>(reader: R, file: &str) -> Result<Vec<(UserId, UserId)>, CorpusError> {
    let mut out = Vec::new();
    for row in rows(reader, file) {
        let (line, f) = row?;
        if f.len() < 2 || f[0].is_empty() || f[1].is_empty() {
            return Err(malformed(file, line, "expected 2 user ids"));
        }
        out.push((UserId(f[0].clone()), UserId(f[1].clone())));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File, CorpusError> {
    File::open(path).map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })
}

/// Reads all three files. A missing social path yields no edges.
pub fn ingest(checkin_path: &Path, poi_path: &Path, social_path: Option<&Path>) -> Result<RawDataset, CorpusError> {
    let pois = parse_pois(open(poi_path)?, &poi_path.display().to_string())?;
    let checkins = parse_checkins(open(checkin_path)?, &checkin_path.display().to_string())?;
    let social = match social_path {
        Some(p) => parse_social(open(p)?, &p.display().to_string())?,
        None => Vec::new(),
    };
    let known: HashSet<&PoiId> = pois.iter().map(|p| &p.poi_id).collect();
    let missing: BTreeSet<String> =
        checkins.iter().filter(|c| !known.contains(&c.poi_id)).map(|c| c.poi_id.0.clone()).collect();
    if !missing.is_empty() {
        return Err(CorpusError::UnknownPoi(missing.into_iter().collect()));
    }
    Ok(RawDataset { pois, checkins, social })
}
