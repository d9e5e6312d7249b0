//! Run configuration, read from a TOML file.
//!
//! Relative paths are resolved against the directory holding the file.
//! Unknown keys are rejected. API keys are never read from here; the file
//! only names the environment variable that holds them.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use connectome_priors::ndm::{FitSettings, Normalization, TimeGrid};
use connectome_priors::prompt::{Ordering, PromptStrategy};
use connectome_priors::rag::{Bm25Params, Chunking, SemanticChunking};
use connectome_priors::{ConnectomeKind, PairScope};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `name,hemisphere` CSV.
    pub parcellation: PathBuf,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub priors: PriorsConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub ndm: NdmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub model_id: String,
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub logprobs: bool,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            model_id: String::new(),
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            logprobs: true,
            timeout_secs: 60,
            max_attempts: 5,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorsConfig {
    pub strategy: String,
    pub orderings: Vec<String>,
    pub repeats: u32,
    pub concurrency_limit: usize,
    /// `region_a,region_b` CSV. Without it the evaluation set's pairs are
    /// used, or every pair in `scope`.
    pub pairs: Option<PathBuf>,
    pub scope: PairScope,
    pub templates_dir: Option<PathBuf>,
    /// JSON object mapping region names to location summaries.
    pub region_context: Option<PathBuf>,
}

impl Default for PriorsConfig {
    fn default() -> Self {
        Self {
            strategy: "minimal".into(),
            orderings: vec!["forward".into(), "reverse".into()],
            repeats: 1,
            concurrency_limit: 8,
            pairs: None,
            scope: PairScope::WithinHemisphere,
            templates_dir: None,
            region_context: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub eval_set: Option<PathBuf>,
    /// Streamline-count atlas used to build a set when `eval_set` is absent.
    pub atlas: Option<PathBuf>,
    pub n_positive: usize,
    pub n_negative: usize,
    pub eval_seed: u64,
    pub cutoff: f64,
    /// `model_id,input_per_1k,output_per_1k` CSV.
    pub prices: Option<PathBuf>,
    pub disagreement_fraction: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            eval_set: None,
            atlas: None,
            n_positive: 50,
            n_negative: 50,
            eval_seed: 0,
            cutoff: 0.5,
            prices: None,
            disagreement_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkingMode {
    Recursive,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Directory of `*.json` source documents.
    pub corpus_dir: Option<PathBuf>,
    /// Defaults to `index` under the output directory.
    pub index_dir: Option<PathBuf>,
    pub chunking: ChunkingMode,
    pub chunk_size: usize,
    pub overlap: usize,
    pub semantic_threshold: f64,
    pub semantic_window: usize,
    pub semantic_max_chars: usize,
    pub k1: f64,
    pub b: f64,
    pub k_candidates: usize,
    pub top: usize,
    pub embedder: EmbedderKind,
    pub embed_dim: usize,
    pub embed_endpoint: String,
    pub embed_model: String,
    pub embed_api_key_env: String,
    pub rerank_endpoint: Option<String>,
    pub rerank_model: String,
    pub rerank_api_key_env: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            corpus_dir: None,
            index_dir: None,
            chunking: ChunkingMode::Recursive,
            chunk_size: 2500,
            overlap: 200,
            semantic_threshold: 0.8,
            semantic_window: 3,
            semantic_max_chars: 2500,
            k1: 1.2,
            b: 0.75,
            k_candidates: 20,
            top: 5,
            embedder: EmbedderKind::Hash,
            embed_dim: 256,
            embed_endpoint: "https://api.openai.com/v1/embeddings".into(),
            embed_model: "text-embedding-3-small".into(),
            embed_api_key_env: "OPENAI_API_KEY".into(),
            rerank_endpoint: None,
            rerank_model: "rerank-english-v3.0".into(),
            rerank_api_key_env: "COHERE_API_KEY".into(),
        }
    }
}

impl RetrievalConfig {
    pub fn chunking(&self) -> Chunking {
        match self.chunking {
            ChunkingMode::Recursive => Chunking::Recursive {
                chunk_size: self.chunk_size,
                overlap: self.overlap,
            },
            ChunkingMode::Semantic => Chunking::Semantic(SemanticChunking {
                threshold: self.semantic_threshold,
                window: self.semantic_window,
                max_chars: self.semantic_max_chars,
            }),
        }
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Microstructure-filtered weight sums.
    pub weights: Option<PathBuf>,
    /// Prior matrix CSV; defaults to `priors.csv` under the output directory.
    pub priors: Option<PathBuf>,
    /// Streamline counts before filtering.
    pub unfiltered: Option<PathBuf>,
    pub cutoff: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            weights: None,
            priors: None,
            unfiltered: None,
            cutoff: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectomeEntry {
    pub label: String,
    pub path: PathBuf,
    #[serde(default = "binary")]
    pub kind: ConnectomeKind,
}

fn binary() -> ConnectomeKind {
    ConnectomeKind::Binary
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NdmConfig {
    /// `region,value` CSV of regional measurements.
    pub target: Option<PathBuf>,
    pub connectomes: Vec<ConnectomeEntry>,
    /// Also fit the connectome produced by the `filter` settings.
    pub include_augmented: bool,
    pub seed_region: Option<String>,
    /// Regions left out of the fit.
    pub exclude: Vec<String>,
    pub normalization: Normalization,
    pub grid_start: f64,
    pub grid_end: f64,
    pub grid_points: usize,
    pub trials: usize,
    pub rng_seed: u64,
}

impl Default for NdmConfig {
    fn default() -> Self {
        let grid = TimeGrid::default();
        Self {
            target: None,
            connectomes: Vec::new(),
            include_augmented: false,
            seed_region: None,
            exclude: Vec::new(),
            normalization: Normalization::Unnormalized,
            grid_start: grid.start,
            grid_end: grid.end,
            grid_points: grid.points,
            trials: 1000,
            rng_seed: 0,
        }
    }
}

impl NdmConfig {
    pub fn settings(&self) -> FitSettings {
        FitSettings {
            seed_region: self.seed_region.clone(),
            grid: TimeGrid {
                start: self.grid_start,
                end: self.grid_end,
                points: self.grid_points,
            },
            normalization: self.normalization,
        }
    }
}

/// A loaded configuration and where its relative paths point.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn resolve_opt(&self, p: &Option<PathBuf>) -> Option<PathBuf> {
        p.as_deref().map(|p| self.resolve(p))
    }
}

impl RunConfig {
    /// Checks everything that can be checked without touching the network.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.strategy()?;
        self.orderings()?;
        let p = &self.priors;
        if p.repeats == 0 {
            return bad("priors.repeats must be at least 1".into());
        }
        if p.concurrency_limit == 0 {
            return bad("priors.concurrency_limit must be at least 1".into());
        }
        let b = &self.backend;
        if !(0.0..=2.0).contains(&b.temperature) {
            return bad(format!("backend.temperature {} is outside [0, 2]", b.temperature));
        }
        if b.max_attempts == 0 {
            return bad("backend.max_attempts must be at least 1".into());
        }
        let e = &self.evaluate;
        if !(0.0..=1.0).contains(&e.cutoff) {
            return bad(format!("evaluate.cutoff {} is outside [0, 1]", e.cutoff));
        }
        if !(0.0..=1.0).contains(&e.disagreement_fraction) {
            return bad("evaluate.disagreement_fraction must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.filter.cutoff) {
            return bad(format!("filter.cutoff {} is outside [0, 1]", self.filter.cutoff));
        }
        let r = &self.retrieval;
        if r.chunking == ChunkingMode::Recursive && r.overlap >= r.chunk_size {
            return bad(format!(
                "retrieval.overlap {} must be below chunk_size {}",
                r.overlap, r.chunk_size
            ));
        }
        if r.k_candidates == 0 || r.k_candidates > 20 || r.top == 0 {
            return bad("retrieval.k_candidates must be in 1..=20 and top at least 1".into());
        }
        if r.embed_dim == 0 {
            return bad("retrieval.embed_dim must be positive".into());
        }
        self.ndm.settings().grid.times().map_err(|e| CliError::Config(format!("ndm: {e}")))?;
        let mut labels: Vec<&str> = self.ndm.connectomes.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("ndm.connectomes labels must be unique".into());
        }
        Ok(())
    }

    pub fn strategy(&self) -> Result<PromptStrategy, CliError> {
        PromptStrategy::from_str(&self.priors.strategy).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn orderings(&self) -> Result<Vec<Ordering>, CliError> {
        if self.priors.orderings.is_empty() {
            return Err(CliError::Config("priors.orderings is empty".into()));
        }
        self.priors
            .orderings
            .iter()
            .map(|o| Ordering::from_str(o).map_err(|e| CliError::Config(e.to_string())))
            .collect()
    }
}
