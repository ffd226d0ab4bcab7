//! Run configuration: JSON file, flag overrides, resolved snapshot.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use genspan_core::bench::BenchConfig;
use genspan_core::data::Split;
use genspan_core::model::ModelConfig;
use genspan_core::prior::{HttpGenerator, HttpScorer, MockGenerator, MockScorer, PriorGeneratorClient, ScorerClient, DEFAULT_ETA, DEFAULT_PRIOR_LEN};
use genspan_core::retrieval::RankConfig;
use genspan_core::synth::SynthSpec;
use genspan_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides `paths.cache`.
pub const CACHE_ENV: &str = "GENSPAN_CACHE";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            manifest: None,
            cache: None,
            checkpoint: None,
            out: PathBuf::from("out"),
        }
    }
}

/// External-service selection for one client role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClientSpec {
    #[default]
    Mock,
    Http {
        endpoint: String,
    },
}

/// Which (query, video) pairs receive a generated prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorScope {
    /// One prior per query from the query text alone (no subtitles).
    #[default]
    Query,
    /// One prior per (query, video), matched against that video's subtitles.
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSettings {
    pub eta: f64,
    pub prior_len: usize,
    pub scope: PriorScope,
    pub scorer: ClientSpec,
    pub generator: ClientSpec,
}

impl Default for PriorSettings {
    fn default() -> Self {
        PriorSettings {
            eta: DEFAULT_ETA,
            prior_len: DEFAULT_PRIOR_LEN,
            scope: PriorScope::Query,
            scorer: ClientSpec::Mock,
            generator: ClientSpec::Mock,
        }
    }
}

impl PriorSettings {
    pub fn scorer(&self) -> Box<dyn ScorerClient> {
        match &self.scorer {
            ClientSpec::Mock => Box::new(MockScorer::default()),
            ClientSpec::Http { endpoint } => Box::new(HttpScorer::new(endpoint.clone())),
        }
    }

    pub fn generator(&self, d: usize, seed: u64) -> Box<dyn PriorGeneratorClient> {
        match &self.generator {
            ClientSpec::Mock => Box::new(MockGenerator {
                d,
                len: self.prior_len,
                seed,
            }),
            ClientSpec::Http { endpoint } => Box::new(HttpGenerator::new(endpoint.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Queries that are ranked and scored.
    pub split: Split,
    /// Directory of `ranked_{vcmr,vmr,vr}.csv`; when set, `eval` scores
    /// these lists instead of running a checkpoint.
    pub rankings: Option<PathBuf>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            split: Split::Test,
            rankings: None,
        }
    }
}

/// Inputs of the relevance-map export. Variants without an input are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceSettings {
    /// Query to map over its ground-truth video; defaults to the first query
    /// of the evaluation split.
    pub query_id: Option<String>,
    /// Manifest whose priors were generated without subtitles; read with the
    /// main checkpoint for the no-subtitle row.
    pub no_subtitle_manifest: Option<PathBuf>,
    /// Checkpoint trained with `selector_mode = off`.
    pub text_only_checkpoint: Option<PathBuf>,
    /// Checkpoint trained with `selector_mode = concat`.
    pub no_selector_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: drives the synthetic corpus, initialisation, training
    /// order and mock generation. Required by `synth` and `train`.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rank: RankConfig,
    pub synth: SynthSpec,
    pub bench: BenchConfig,
    pub prior: PriorSettings,
    pub eval: EvalSettings,
    pub relevance: RelevanceSettings,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Loads the file (if any), then applies flags and the cache variable.
    /// The master seed, when present, is copied into the synth and train
    /// sections so the snapshot shows the values actually used.
    pub fn resolve(file: Option<&Path>, over: &Overrides) -> Result<RunConfig> {
        let mut cfg = match file {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if over.seed.is_some() {
            cfg.seed = over.seed;
        }
        if over.threads.is_some() {
            cfg.threads = over.threads;
        }
        if let Some(out) = &over.out {
            cfg.paths.out = out.clone();
        }
        if let Some(cache) = &over.cache {
            cfg.paths.cache = Some(cache.clone());
        }
        if let Some(seed) = cfg.seed {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
        }
        if cfg.threads == Some(0) {
            bail!("--threads must be at least 1");
        }
        Ok(cfg)
    }

    pub fn require_seed(&self, command: &str) -> Result<u64> {
        self.seed.with_context(|| format!("`{command}` needs a seed (--seed or \"seed\" in the config)"))
    }

    pub fn manifest(&self) -> Result<&Path> {
        existing(self.paths.manifest.as_deref(), "paths.manifest")
    }

    pub fn checkpoint(&self) -> Result<&Path> {
        existing(self.paths.checkpoint.as_deref(), "paths.checkpoint")
    }

    /// `paths.cache`, else `<out>/cache`.
    pub fn cache_root(&self) -> PathBuf {
        self.paths.cache.clone().unwrap_or_else(|| self.paths.out.join("cache"))
    }

    /// Writes `resolved_config.json` under the output directory.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.paths.out).with_context(|| format!("creating {}", self.paths.out.display()))?;
        let path = self.paths.out.join(RESOLVED_CONFIG);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn existing<'a>(p: Option<&'a Path>, field: &str) -> Result<&'a Path> {
    let p = p.with_context(|| format!("{field} is not set"))?;
    if !p.is_file() {
        bail!("{field}: {} does not exist", p.display());
    }
    Ok(p)
}
