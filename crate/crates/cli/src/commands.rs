use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use chrono::{Datelike, Timelike};
use privpoi::corpus::{
    chronological_split, ingest as ingest_tsv, parse_timestamp, preprocess, read_dataset, write_dataset, CheckInRecord,
    Dataset, DatasetSplit, DatasetStats, EvalInstance, PoiId, PreprocessConfig, UserId,
};
use privpoi::evaluation::{
    run_eval, sweep as run_sweep, write_results_csv, write_sweep_csv, Dist, EvalRun, LlmRanker, MostPop, Ranker,
    SweepParam,
};
use privpoi::kb::KnowledgeBase;
use privpoi::llm::{mock::mock_analyst, ChatBackend, HttpBackend, LlmClient, RecordingBackend, ReplayBackend};
use privpoi::pipeline::{
    collect_uploads, extract_into_kb, prepare_request, read_uploads, write_uploads, Experiment, PipelineConfig, Uploads,
};
use privpoi::prompting::PromptSet;
use privpoi::recommender::rank_by_distance;
use privpoi::synthetic::{generate, write_tsv, SyntheticSpec};
use serde::Serialize;
use tracing::info;

use crate::config::{AppConfig, BackendKind};
use crate::UsageError;

const MANIFEST: &str = "run-manifest.json";
const DEFAULT_RECOMMEND_CANDIDATES: usize = 100;

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'static str,
    config: &'a AppConfig,
    pipeline: Option<&'a PipelineConfig>,
    run_seeds: Vec<u64>,
    dataset: Option<DatasetStats>,
}

fn write_manifest(dir: &Path, m: &RunManifest<'_>) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(m)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn manifest<'a>(command: &'a str, cfg: &'a AppConfig, pipeline: Option<&'a PipelineConfig>) -> RunManifest<'a> {
    RunManifest { command, version: env!("CARGO_PKG_VERSION"), config: cfg, pipeline, run_seeds: Vec::new(), dataset: None }
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        bail!("no dataset at {} (run `privpoi ingest` first)", dir.display());
    }
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn prompts(cfg: &AppConfig) -> anyhow::Result<PromptSet> {
    Ok(match &cfg.paths.prompts {
        Some(dir) => PromptSet::with_overrides(dir)?,
        None => PromptSet::builtin(),
    })
}

fn client(cfg: &AppConfig) -> anyhow::Result<LlmClient> {
    let backend: Arc<dyn ChatBackend> = match cfg.llm.backend {
        BackendKind::Mock => Arc::new(mock_analyst()),
        BackendKind::Http => {
            Arc::new(HttpBackend::from_env(&cfg.llm.base_url, Duration::from_millis(cfg.llm.timeout_ms))?)
        }
        BackendKind::Replay => {
            let path = cfg.paths.cassette.as_ref().ok_or_else(|| UsageError("replay backend needs --cassette".into()))?;
            Arc::new(ReplayBackend::open(path)?)
        }
    };
    let backend: Arc<dyn ChatBackend> = match &cfg.llm.record {
        Some(path) => Arc::new(RecordingBackend::new(backend, path)?),
        None => backend,
    };
    Ok(LlmClient::new(backend, cfg.llm.policy(), cfg.llm.settings()))
}

fn uploads(cfg: &AppConfig, ds: &Dataset, split: &DatasetSplit, pcfg: &PipelineConfig) -> anyhow::Result<Uploads> {
    match &cfg.paths.uploads {
        Some(dir) => read_uploads(dir).with_context(|| format!("reading uploads {}", dir.display())),
        None => Ok(collect_uploads(ds, split, pcfg)?),
    }
}

pub fn synth(cfg: &AppConfig, users: usize, pois: usize, days: usize, out: &Path) -> anyhow::Result<()> {
    let spec = SyntheticSpec { users, pois, days, seed: cfg.seed, ..Default::default() };
    let raw = generate(&spec);
    let paths = write_tsv(out, &raw)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

pub struct IngestInput {
    pub checkins: PathBuf,
    pub pois: PathBuf,
    pub social: Option<PathBuf>,
    pub city: String,
    pub core_k: Option<usize>,
    pub region_km: Option<f64>,
}

pub fn ingest(cfg: &AppConfig, input: &IngestInput) -> anyhow::Result<()> {
    let mut pre = PreprocessConfig::for_city(&input.city)
        .ok_or_else(|| UsageError(format!("unknown city {:?} (SIN, NY, PHO)", input.city)))?;
    if let Some(k) = input.core_k {
        pre.core_k = k;
    }
    if let Some(km) = input.region_km {
        pre.region_cell_km = km;
    }
    let raw = ingest_tsv(&input.checkins, &input.pois, input.social.as_deref())?;
    let ds = preprocess(&raw, &pre)?;
    write_dataset(&cfg.paths.data, &ds)?;
    let stats = ds.stats();
    info!(users = stats.users, pois = stats.pois, checkins = stats.checkins, "dataset written to {}", cfg.paths.data.display());
    println!("{}", serde_json::to_string(&stats)?);
    let mut m = manifest("ingest", cfg, None);
    m.dataset = Some(stats);
    write_manifest(&cfg.paths.data, &m)
}

pub fn perturb(cfg: &AppConfig) -> anyhow::Result<()> {
    let pcfg = cfg.pipeline()?;
    let ds = load_dataset(&cfg.paths.data)?;
    let split = chronological_split(&ds.users);
    let up = collect_uploads(&ds, &split, &pcfg)?;
    let dir = cfg.paths.uploads.clone().unwrap_or_else(|| cfg.paths.out.join("perturbed"));
    write_uploads(&dir, &up)?;
    info!(users = up.users.len(), edges = up.graph.num_edges(), "uploads written to {}", dir.display());
    let mut m = manifest("perturb", cfg, Some(&pcfg));
    m.dataset = Some(ds.stats());
    write_manifest(&dir, &m)
}

/// Experiment over an existing store, or one filled now when `kb` does
/// not exist yet (`persist` keeps the result on disk).
fn experiment<'a>(
    cfg: &AppConfig,
    pcfg: &PipelineConfig,
    ds: &'a Dataset,
    split: &DatasetSplit,
    client: &LlmClient,
    prompts: &PromptSet,
    kb: KnowledgeBase,
    fresh_uploads: bool,
) -> anyhow::Result<Experiment<'a>> {
    let up = if fresh_uploads { collect_uploads(ds, split, pcfg)? } else { uploads(cfg, ds, split, pcfg)? };
    let needs_extraction = kb.is_empty() && !pcfg.extraction.aspects.is_empty();
    let mut exp = Experiment::assemble(ds, split.clone(), pcfg.clone(), up, kb)?;
    if needs_extraction {
        exp.extraction = extract_into_kb(&exp.uploads, &exp.vocab, pcfg, client, prompts, &exp.kb)?;
        info!(users = exp.extraction.users, parse_failures = exp.extraction.parse_failures, "preferences extracted");
    }
    Ok(exp)
}

pub fn extract(cfg: &AppConfig) -> anyhow::Result<()> {
    let pcfg = cfg.pipeline()?;
    let ds = load_dataset(&cfg.paths.data)?;
    let split = chronological_split(&ds.users);
    let up = uploads(cfg, &ds, &split, &pcfg)?;
    let (client, prompts) = (client(cfg)?, prompts(cfg)?);
    if let Some(parent) = cfg.paths.kb.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let kb = KnowledgeBase::open(&cfg.paths.kb)?;
    let vocab = ds.catalog.vocabularies(pcfg.privacy.distance_bins.clone());
    let stats = extract_into_kb(&up, &vocab, &pcfg, &client, &prompts, &kb)?;
    info!(users = stats.users, calls = client.total_calls(), "store written to {}", cfg.paths.kb.display());
    println!("{}", serde_json::to_string(&stats)?);
    let mut m = manifest("extract", cfg, Some(&pcfg));
    m.dataset = Some(ds.stats());
    write_manifest(&cfg.paths.out, &m)
}

/// Check-ins of `user` earlier on the local day of `at`; the most recent
/// earlier day when that day has none yet.
fn context_at(ds: &Dataset, user: &UserId, at: chrono::DateTime<chrono::Utc>) -> anyhow::Result<Vec<CheckInRecord>> {
    let seqs = ds.users.iter().find(|u| &u.user_id == user).with_context(|| format!("unknown user {user}"))?;
    let local = at.with_timezone(&ds.config.offset()).date_naive();
    let before: Vec<&Vec<CheckInRecord>> =
        seqs.all().filter(|s| s.first().is_some_and(|c| c.timestamp < at)).collect();
    let same_day = before.iter().rev().find(|s| s[0].timestamp.with_timezone(&ds.config.offset()).date_naive() == local);
    let seq = match same_day.or(before.last()) {
        Some(s) => s,
        None => bail!("user {user} has no check-ins before {at}"),
    };
    Ok(seq.iter().filter(|c| c.timestamp < at).cloned().collect())
}

pub fn recommend(cfg: &AppConfig, user: &str, at: &str, candidates_file: Option<&Path>) -> anyhow::Result<()> {
    let pcfg = cfg.pipeline()?;
    let at = parse_timestamp(at).ok_or_else(|| UsageError(format!("cannot parse time {at:?}")))?;
    let ds = load_dataset(&cfg.paths.data)?;
    let split = chronological_split(&ds.users);
    let (client, prompts) = (client(cfg)?, prompts(cfg)?);
    let kb = KnowledgeBase::open(&cfg.paths.kb)?;
    if kb.is_empty() {
        bail!("no stored preferences at {} (run `privpoi extract` first)", cfg.paths.kb.display());
    }
    let exp = experiment(cfg, &pcfg, &ds, &split, &client, &prompts, kb, false)?;
    let user = UserId(user.to_string());
    let context = context_at(&ds, &user, at)?;
    let candidates = match candidates_file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| ds.catalog.position(&PoiId(l.to_string())).with_context(|| format!("unknown POI {l} in {}", path.display())))
                .collect::<anyhow::Result<Vec<_>>>()?
        }
        None => {
            let last = ds.catalog.position(&context.last().expect("non-empty context").poi_id).expect("catalog POI");
            let all: Vec<usize> = (0..ds.catalog.len()).collect();
            rank_by_distance(&ds.catalog, last, &all).into_iter().take(DEFAULT_RECOMMEND_CANDIDATES).collect()
        }
    };
    let local = at.with_timezone(&ds.config.offset());
    let when = (local.weekday(), local.hour() as u8);
    let req = prepare_request(&ds.catalog, &exp.vocab, &user, &context, when, candidates, &pcfg, at.timestamp() as u64)?;
    let result = exp.recommender(&client, &prompts).recommend(&req)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    write_manifest(&cfg.paths.out, &manifest("recommend", cfg, Some(&pcfg)))
}

fn wants_llm(cfg: &AppConfig) -> bool {
    cfg.eval.methods.iter().any(|m| m.eq_ignore_ascii_case("llm"))
}

fn check_methods(cfg: &AppConfig) -> Result<(), UsageError> {
    for m in &cfg.eval.methods {
        if !["mostpop", "dist", "llm"].contains(&m.to_ascii_lowercase().as_str()) {
            return Err(UsageError(format!("unknown method {m:?} (MostPop, Dist, LLM)")));
        }
    }
    Ok(())
}

/// Scores the configured methods on every test instance.
fn evaluate_once(
    cfg: &AppConfig,
    pcfg: &PipelineConfig,
    ds: &Dataset,
    split: &DatasetSplit,
    exp: Option<&Experiment<'_>>,
    client: &LlmClient,
    prompts: &PromptSet,
    transcripts: Option<&mut dyn Write>,
) -> anyhow::Result<EvalRun> {
    let instances: Vec<&EvalInstance> = split.test_instances().collect();
    let most_pop = MostPop::new(&ds.catalog, split.train_checkins().map(|c| &c.poi_id));
    let dist = Dist::new(&ds.catalog);
    let llm = exp.map(|e| LlmRanker::new(cfg.llm_method_name(), e, e.recommender(client, prompts)));
    let mut rankers: Vec<&dyn Ranker> = Vec::new();
    for m in &cfg.eval.methods {
        match m.to_ascii_lowercase().as_str() {
            "mostpop" => rankers.push(&most_pop),
            "dist" => rankers.push(&dist),
            _ => rankers.push(llm.as_ref().expect("experiment prepared for LLM")),
        }
    }
    let snapshot = serde_json::to_value(pcfg)?;
    Ok(run_eval(&rankers, &instances, &ds.catalog, &cfg.eval_settings(), snapshot, transcripts)?)
}

pub fn evaluate(cfg: &AppConfig) -> anyhow::Result<()> {
    check_methods(cfg)?;
    let pcfg = cfg.pipeline()?;
    let ds = load_dataset(&cfg.paths.data)?;
    let split = chronological_split(&ds.users);
    let (client, prompts) = (client(cfg)?, prompts(cfg)?);
    let exp = if wants_llm(cfg) {
        if let Some(parent) = cfg.paths.kb.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let kb = KnowledgeBase::open(&cfg.paths.kb)?;
        Some(experiment(cfg, &pcfg, &ds, &split, &client, &prompts, kb, false)?)
    } else {
        None
    };
    let out = &cfg.paths.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut log = BufWriter::new(File::create(out.join("transcripts.ndjson"))?);
    let run = evaluate_once(cfg, &pcfg, &ds, &split, exp.as_ref(), &client, &prompts, Some(&mut log))?;
    log.flush()?;
    let mut csv = Vec::new();
    write_results_csv(&mut csv, &run)?;
    fs::write(out.join("results.csv"), &csv)?;
    print!("{}", String::from_utf8(csv)?);
    info!(calls = client.total_calls(), "results written to {}", out.join("results.csv").display());
    let mut m = manifest("evaluate", cfg, Some(&pcfg));
    m.run_seeds = run.seeds.clone();
    m.dataset = Some(ds.stats());
    write_manifest(out, &m)
}

pub fn sweep(cfg: &AppConfig, param: &str, grid: Option<&str>) -> anyhow::Result<()> {
    check_methods(cfg)?;
    let param = SweepParam::parse(param).ok_or_else(|| UsageError(format!("unknown sweep parameter {param:?}")))?;
    let grid = match grid {
        Some(g) => crate::config::parse_floats(g)?,
        None => param.default_grid(),
    };
    let pcfg = cfg.pipeline()?;
    let ds = load_dataset(&cfg.paths.data)?;
    let split = chronological_split(&ds.users);
    let (client, prompts) = (client(cfg)?, prompts(cfg)?);
    if cfg.paths.uploads.is_some() {
        info!("sweep recomputes uploads per grid point; paths.uploads is ignored");
    }
    let points = run_sweep(param, &grid, &pcfg, |point| {
        let exp = if wants_llm(cfg) {
            Some(experiment(cfg, point, &ds, &split, &client, &prompts, KnowledgeBase::in_memory(), true).map_err(boxed)?)
        } else {
            None
        };
        evaluate_once(cfg, point, &ds, &split, exp.as_ref(), &client, &prompts, None).map_err(boxed)
    })?;
    let out = &cfg.paths.out;
    fs::create_dir_all(out)?;
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, param, &points)?;
    fs::write(out.join("sweep.csv"), &csv)?;
    print!("{}", String::from_utf8(csv)?);
    let mut m = manifest("sweep", cfg, Some(&pcfg));
    m.run_seeds = cfg.eval_settings().run_seeds();
    m.dataset = Some(ds.stats());
    write_manifest(out, &m)
}

fn boxed(e: anyhow::Error) -> privpoi::evaluation::EvalError {
    privpoi::evaluation::EvalError::Ranker { method: "sweep".into(), source: e.into() }
}
