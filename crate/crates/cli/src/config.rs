//! Effective configuration: defaults, then the TOML file, then flags.

use std::path::{Path, PathBuf};

use privpoi::corpus::{Aspect, DistanceBins};
use privpoi::evaluation::{EvalSettings, DEFAULT_CANDIDATES, DEFAULT_RUNS};
use privpoi::extraction::{ExtractionConfig, ReflectionSources};
use privpoi::llm::{ChatSettings, ClientPolicy};
use privpoi::pipeline::PipelineConfig;
use privpoi::privacy::{FlipParams, PrivacyConfig};
use privpoi::recommender::RecommenderConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every logical core.
    pub jobs: usize,
    pub ablate: Vec<String>,
    pub paths: Paths,
    pub privacy: PrivacySection,
    pub extraction: ExtractionSection,
    pub recommender: RecommenderSection,
    pub llm: LlmSection,
    pub eval: EvalSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 0,
            ablate: Vec::new(),
            paths: Paths::default(),
            privacy: PrivacySection::default(),
            extraction: ExtractionSection::default(),
            recommender: RecommenderSection::default(),
            llm: LlmSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Preprocessed dataset directory.
    pub data: PathBuf,
    /// Output of `perturb`. When absent, uploads are computed on the fly.
    pub uploads: Option<PathBuf>,
    pub kb: PathBuf,
    pub out: PathBuf,
    pub prompts: Option<PathBuf>,
    /// Cassette read by the replay backend.
    pub cassette: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            uploads: None,
            kb: "out/kb.ndjson".into(),
            out: "out".into(),
            prompts: None,
            cassette: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: f64,
    pub h_min: usize,
    pub h_max: usize,
    pub distance_bins: Vec<f64>,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self { epsilon: 1.0, h_min: 5, h_max: 20, distance_bins: DistanceBins::default().edges().to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSection {
    pub m: usize,
    pub n: usize,
    pub aspects: Vec<Aspect>,
    /// Any of `recent`, `history`.
    pub reflection_sources: Vec<String>,
    pub participation: f64,
    pub repair_retries: usize,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        let d = ExtractionConfig::default();
        Self {
            m: d.m,
            n: d.n,
            aspects: d.aspects,
            reflection_sources: vec!["recent".into(), "history".into()],
            participation: 1.0,
            repair_retries: d.repair_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommenderSection {
    pub aspects: Vec<Aspect>,
    pub neighbors: bool,
    pub max_social: usize,
}

impl Default for RecommenderSection {
    fn default() -> Self {
        let d = RecommenderConfig::default();
        Self { aspects: d.aspects, neighbors: d.neighbors, max_social: d.max_social }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub backend: BackendKind,
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Append every exchange to this cassette.
    pub record: Option<PathBuf>,
}

impl Default for LlmSection {
    fn default() -> Self {
        let s = ChatSettings::default();
        let p = ClientPolicy::default();
        Self {
            backend: BackendKind::Mock,
            base_url: "https://api.openai.com/v1".into(),
            model: s.model,
            temperature: s.temperature,
            max_tokens: s.max_tokens,
            timeout_ms: p.timeout_ms,
            max_retries: p.max_retries,
            max_in_flight: p.max_in_flight,
            record: None,
        }
    }
}

impl LlmSection {
    pub fn settings(&self) -> ChatSettings {
        ChatSettings { model: self.model.clone(), temperature: self.temperature, max_tokens: self.max_tokens }
    }

    pub fn policy(&self) -> ClientPolicy {
        ClientPolicy {
            timeout_ms: self.timeout_ms,
            max_retries: self.max_retries,
            max_in_flight: self.max_in_flight,
            ..ClientPolicy::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub runs: usize,
    pub candidates: usize,
    /// `MostPop`, `Dist`, `LLM`.
    pub methods: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            runs: DEFAULT_RUNS,
            candidates: DEFAULT_CANDIDATES,
            methods: vec!["MostPop".into(), "Dist".into(), "LLM".into()],
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, UsageError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
    }

    fn reflection(&self) -> Result<ReflectionSources, UsageError> {
        let mut r = ReflectionSources::none();
        for s in &self.extraction.reflection_sources {
            match s.trim().to_ascii_lowercase().as_str() {
                "recent" => r.recent = true,
                "history" => r.history = true,
                "none" | "" => {}
                other => return Err(UsageError(format!("unknown reflection source {other:?}"))),
            }
        }
        Ok(r)
    }

    /// Pipeline settings with ablations applied.
    pub fn pipeline(&self) -> Result<PipelineConfig, UsageError> {
        let bad = |e: &dyn std::fmt::Display| UsageError(e.to_string());
        let bins = DistanceBins::new(self.privacy.distance_bins.clone())
            .ok_or_else(|| UsageError("distance bins must be positive and increasing".into()))?;
        let p = &self.privacy;
        let privacy = PrivacyConfig {
            epsilon: p.epsilon,
            flip: FlipParams::randomized_response(p.epsilon).map_err(|e| bad(&e))?,
            h_min: p.h_min,
            h_max: p.h_max,
            distance_bins: bins,
            ..PrivacyConfig::new(1.0).expect("valid")
        };
        let mut cfg = PipelineConfig {
            privacy,
            mechanisms: Default::default(),
            extraction: ExtractionConfig {
                m: self.extraction.m,
                n: self.extraction.n,
                aspects: self.extraction.aspects.clone(),
                reflection: self.reflection()?,
                repair_retries: self.extraction.repair_retries,
            },
            recommender: RecommenderConfig {
                aspects: self.recommender.aspects.clone(),
                neighbors: self.recommender.neighbors,
                max_social: self.recommender.max_social,
                repair_retries: self.extraction.repair_retries,
            },
            participation: self.extraction.participation,
            seed: self.seed,
        };
        cfg.apply_ablations(&self.ablate).map_err(|e| bad(&e))?;
        cfg.validate().map_err(|e| bad(&e))?;
        Ok(cfg)
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings { runs: self.eval.runs, num_candidates: self.eval.candidates, seed: self.seed }
    }

    /// Name of the LLM method in result tables, e.g. `LLM-NR-PT-P`.
    pub fn llm_method_name(&self) -> String {
        let mut name = "LLM".to_string();
        for a in &self.ablate {
            let a = a.trim().trim_start_matches('-').to_ascii_uppercase();
            if !a.is_empty() {
                name.push('-');
                name.push_str(&a);
            }
        }
        name
    }
}

/// Splits `a,b , c` into trimmed non-empty parts.
pub fn comma_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

pub fn parse_aspects(s: &str) -> Result<Vec<Aspect>, UsageError> {
    comma_list(s)
        .iter()
        .filter(|x| !x.eq_ignore_ascii_case("none"))
        .map(|x| Aspect::parse(x).ok_or_else(|| UsageError(format!("unknown aspect {x:?}"))))
        .collect()
}

pub fn parse_floats(s: &str) -> Result<Vec<f64>, UsageError> {
    comma_list(s).iter().map(|x| x.parse().map_err(|_| UsageError(format!("not a number: {x:?}")))).collect()
}
