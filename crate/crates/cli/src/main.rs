//! `privpoi`: preprocessing, perturbation, extraction, recommendation, and
//! evaluation from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{comma_list, parse_aspects, parse_floats, AppConfig, BackendKind};

/// Bad flags, values, or config files. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "privpoi", version, about = "Privacy-preserving LLM next-POI recommendation")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// trace, debug, info, warn, or error.
    #[arg(long, global = true, default_value = "info")]
    log_level: tracing::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic check-in corpus as TSV files.
    Synth(SynthArgs),
    /// Parse TSV dumps, filter, and write a preprocessed dataset.
    Ingest(IngestArgs),
    /// Perturb every user's uploads and the social graph.
    Perturb(Overrides),
    /// Extract fine-grained preferences into the store.
    Extract(Overrides),
    /// Recommend for one user at one moment; prints a JSON document.
    Recommend(RecommendArgs),
    /// Score baselines and the LLM pipeline; writes results.csv.
    Evaluate(Overrides),
    /// Evaluate over a grid of one parameter; writes sweep.csv.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    users: usize,
    #[arg(long, default_value_t = 300)]
    pois: usize,
    #[arg(long, default_value_t = 15)]
    days: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    checkins: PathBuf,
    #[arg(long)]
    pois: PathBuf,
    #[arg(long)]
    social: Option<PathBuf>,
    /// SIN, NY, or PHO; sets the local clock.
    #[arg(long, default_value = "SIN")]
    city: String,
    #[arg(long)]
    core_k: Option<usize>,
    #[arg(long)]
    region_km: Option<f64>,
    /// Dataset directory to write (default: paths.data).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flags shared by the pipeline subcommands.
#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    uploads: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    h_min: Option<usize>,
    #[arg(long)]
    h_max: Option<usize>,
    /// Comma-separated bin edges in km.
    #[arg(long)]
    distance_bins: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Comma list of category, region, distance; `none` for no aspects.
    #[arg(long)]
    aspects: Option<String>,
    /// Comma list of recent, history; `none` for no reflection.
    #[arg(long)]
    reflection_sources: Option<String>,
    #[arg(long)]
    participation: Option<f64>,
    /// Comma list such as -NR,-PT-P.
    #[arg(long, allow_hyphen_values = true)]
    ablate: Option<String>,
    #[arg(long, value_enum)]
    llm: Option<BackendKind>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Append every LLM exchange to this cassette.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    /// Comma list of MostPop, Dist, LLM.
    #[arg(long)]
    methods: Option<String>,
}

#[derive(Debug, Args)]
struct RecommendArgs {
    #[arg(long)]
    user: String,
    /// Query time, ISO-8601 or epoch seconds.
    #[arg(long)]
    at: String,
    /// One POI id per line (default: the 100 POIs nearest the last visit).
    #[arg(long)]
    candidates_file: Option<PathBuf>,
    #[command(flatten)]
    common: Overrides,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// epsilon, m, n, or participation.
    #[arg(long)]
    param: String,
    /// Comma-separated values (default: the parameter's usual grid).
    #[arg(long)]
    grid: Option<String>,
    #[command(flatten)]
    common: Overrides,
}

impl Overrides {
    fn apply(&self, cfg: &mut AppConfig) -> Result<(), UsageError> {
        macro_rules! set {
            ($flag:expr, $target:expr) => {
                if let Some(v) = &$flag {
                    $target = v.clone().into();
                }
            };
        }
        set!(self.data, cfg.paths.data);
        if let Some(v) = &self.uploads {
            cfg.paths.uploads = Some(v.clone());
        }
        set!(self.kb, cfg.paths.kb);
        set!(self.out, cfg.paths.out);
        if let Some(v) = &self.prompts {
            cfg.paths.prompts = Some(v.clone());
        }
        set!(self.epsilon, cfg.privacy.epsilon);
        set!(self.h_min, cfg.privacy.h_min);
        set!(self.h_max, cfg.privacy.h_max);
        if let Some(v) = &self.distance_bins {
            cfg.privacy.distance_bins = parse_floats(v)?;
        }
        set!(self.m, cfg.extraction.m);
        set!(self.n, cfg.extraction.n);
        if let Some(v) = &self.aspects {
            let a = parse_aspects(v)?;
            cfg.extraction.aspects = a.clone();
            cfg.recommender.aspects = a;
        }
        if let Some(v) = &self.reflection_sources {
            cfg.extraction.reflection_sources = comma_list(v);
        }
        set!(self.participation, cfg.extraction.participation);
        if let Some(v) = &self.ablate {
            cfg.ablate = comma_list(v);
        }
        set!(self.llm, cfg.llm.backend);
        set!(self.base_url, cfg.llm.base_url);
        set!(self.model, cfg.llm.model);
        if let Some(v) = &self.cassette {
            cfg.paths.cassette = Some(v.clone());
        }
        if let Some(v) = &self.record {
            cfg.llm.record = Some(v.clone());
        }
        set!(self.runs, cfg.eval.runs);
        set!(self.candidates, cfg.eval.candidates);
        if let Some(v) = &self.methods {
            cfg.eval.methods = comma_list(v);
        }
        Ok(())
    }
}

fn effective_config(cli: &Cli) -> Result<AppConfig, UsageError> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Perturb(o) | Command::Extract(o) | Command::Evaluate(o) => o.apply(&mut cfg)?,
        Command::Recommend(r) => r.common.apply(&mut cfg)?,
        Command::Sweep(s) => s.common.apply(&mut cfg)?,
        Command::Ingest(i) => {
            if let Some(out) = &i.out {
                cfg.paths.data = out.clone();
            }
        }
        Command::Synth(_) => {}
    }
    // Surface bad values before any work starts.
    cfg.pipeline()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = effective_config(&cli)?;
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global()?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&cfg, a.users, a.pois, a.days, &a.out),
        Command::Ingest(a) => commands::ingest(
            &cfg,
            &commands::IngestInput {
                checkins: a.checkins,
                pois: a.pois,
                social: a.social,
                city: a.city,
                core_k: a.core_k,
                region_km: a.region_km,
            },
        ),
        Command::Perturb(_) => commands::perturb(&cfg),
        Command::Extract(_) => commands::extract(&cfg),
        Command::Recommend(a) => commands::recommend(&cfg, &a.user, &a.at, a.candidates_file.as_deref()),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Sweep(a) => commands::sweep(&cfg, &a.param, a.grid.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(cli.log_level).with_target(false).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
