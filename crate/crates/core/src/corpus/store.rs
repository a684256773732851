//! Directory-of-NDJSON persistence for preprocessed datasets.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Catalog, CorpusError, Dataset, DatasetStats, PoiEntry, PreprocessConfig, SocialGraph, UserId, UserSequences};
use crate::geo::RegionGrid;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub preprocess: PreprocessConfig,
    pub grid: RegionGrid,
    pub categories: Vec<String>,
    pub stats: DatasetStats,
}

#[derive(Serialize, Deserialize)]
struct Edge {
    a: UserId,
    b: UserId,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |e| CorpusError::Io { path: path.display().to_string(), source: e }
}

pub fn write_ndjson<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for item in items {
        serde_json::to_writer(&mut w, &item)
            .map_err(|e| CorpusError::Json { path: path.display().to_string(), source: e })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            file: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_ndjson(&dir.join("pois.ndjson"), ds.catalog.pois())?;
    write_ndjson(&dir.join("sequences.ndjson"), &ds.users)?;
    write_ndjson(&dir.join("social.ndjson"), ds.social.edges().into_iter().map(|(a, b)| Edge { a, b }))?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        preprocess: ds.config.clone(),
        grid: ds.catalog.grid().clone(),
        categories: ds.catalog.categories().to_vec(),
        stats: ds.stats(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CorpusError::Json { path: path.display().to_string(), source: e })?;
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, CorpusError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| CorpusError::Json { path: path.display().to_string(), source: e })?;
    let pois: Vec<PoiEntry> = read_ndjson(&dir.join("pois.ndjson"))?;
    let users: Vec<UserSequences> = read_ndjson(&dir.join("sequences.ndjson"))?;
    let edges: Vec<Edge> = read_ndjson(&dir.join("social.ndjson"))?;
    let catalog = Catalog::from_parts(pois, manifest.categories, manifest.grid)?;
    let edges: Vec<(UserId, UserId)> = edges.into_iter().map(|e| (e.a, e.b)).collect();
    let social = SocialGraph::new(users.iter().map(|u| u.user_id.clone()), &edges);
    Ok(Dataset { catalog, users, social, config: manifest.preprocess })
}
