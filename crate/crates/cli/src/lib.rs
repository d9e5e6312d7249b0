//! Command-line runner: each subcommand reads a run configuration, does one
//! step of the pipeline and writes fixed-name outputs plus a manifest into
//! the run directory.

pub mod config;
mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use connectome_priors::connectome::ConnectomeError;
use connectome_priors::eval::EvalError;
use connectome_priors::filter::FilterError;
use connectome_priors::gateway::GatewayError;
use connectome_priors::ndm::NdmError;
use connectome_priors::prior::PriorError;
use connectome_priors::prompt::PromptError;
use connectome_priors::rag::RagError;
use thiserror::Error;

pub use commands::run;
pub use config::{LoadedConfig, RunConfig};
pub use manifest::{CommandManifest, MANIFEST_FILE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("backend: {0}")]
    Backend(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    /// Process exit status for this class of error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Backend(_) => 4,
            CliError::Data(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Io { path, source } => CliError::Io {
                path: path.into(),
                source,
            },
            GatewayError::MissingCredential(_) | GatewayError::InvalidPlan(_) => CliError::Config(e.to_string()),
            GatewayError::StoreCorrupt { .. } => CliError::Data(e.to_string()),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<ConnectomeError> for CliError {
    fn from(e: ConnectomeError) -> Self {
        match e {
            ConnectomeError::Io { path, source } => CliError::Io {
                path: path.into(),
                source,
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<RagError> for CliError {
    fn from(e: RagError) -> Self {
        match e {
            RagError::Io { path, source } => CliError::Io { path, source },
            RagError::Gateway(g) => g.into(),
            RagError::MissingCredential(_) | RagError::InvalidChunking { .. } => CliError::Config(e.to_string()),
            RagError::Embedder(_) | RagError::Reranker(_) => CliError::Backend(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { path, source } => CliError::Io { path, source },
            EvalError::Connectome(c) => c.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NdmError> for CliError {
    fn from(e: NdmError) -> Self {
        match e {
            NdmError::Connectome(c) => c.into(),
            NdmError::InvalidGrid(_) | NdmError::AmbiguousSeed(_) | NdmError::UnknownSeed(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Connectome(c) => c.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PriorError> for CliError {
    fn from(e: PriorError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Io { path, source } => CliError::Io {
                path: path.into(),
                source,
            },
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "connectome-priors", version, about = "Connectome edge priors from language models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Answer every request from this store; a miss is an error.
    #[arg(long, global = true, conflicts_with = "record")]
    pub replay: Option<PathBuf>,
    /// Query the live backend, caching every response in this store.
    #[arg(long, global = true)]
    pub record: Option<PathBuf>,
    /// Overrides the evaluation-set and permutation seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Query the model for every pair and aggregate the verdicts.
    Priors {
        /// `region_a,region_b` CSV of pairs to query.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Score records against an evaluation set.
    Evaluate {
        /// Defaults to `records.jsonl` in the run directory.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        eval_set: Option<PathBuf>,
    },
    /// Chunk, embed and index a document corpus.
    Ingest,
    /// Citation-grounded queries against the index.
    Ground {
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Also summarise where each queried region lies.
        #[arg(long)]
        contexts: bool,
    },
    /// Augment a filtered connectome with confident priors.
    Filter,
    /// Fit the diffusion model on each configured connectome.
    Ndm,
    /// Permutation test of the prior-added edges.
    Permute,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Priors { .. } => "priors",
            Command::Evaluate { .. } => "evaluate",
            Command::Ingest => "ingest",
            Command::Ground { .. } => "ground",
            Command::Filter => "filter",
            Command::Ndm => "ndm",
            Command::Permute => "permute",
        }
    }
}
