//! Retrieval over literature and parcellation documentation: chunking,
//! BM25 and embedding search fused by reciprocal rank, reranking, and the
//! two grounded query flows built on them.

pub mod bm25;
pub mod chunk;
pub mod embed;
mod grounded;
mod index;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::prior::PriorError;
use crate::prompt::PromptError;

pub use bm25::{tokenize, Bm25Params, Bm25Stats};
pub use chunk::{split_recursive, split_semantic, SemanticChunking};
pub use embed::{cosine, Embedder, HashEmbedder, Reranker};
#[cfg(feature = "http")]
pub use embed::{HttpEmbedder, HttpReranker};
pub use grounded::{
    extract_json_object, grounded_query, humanize_region, region_context, region_contexts,
    run_grounded_batch, GroundingOptions, RegionContext,
};
pub use index::{
    bm25_search, hybrid_search, load_corpus_dir, rerank, verify_citations, vector_search, Chunking,
    CorpusIndex, DocumentChunk, HybridResult, RerankOutcome, RetrievalHit, ScoredChunk,
    SourceDocument, RRF_K,
};

#[derive(Debug, Error)]
pub enum RagError {
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("chunk size {chunk_size} must exceed overlap {overlap}")]
    InvalidChunking { chunk_size: usize, overlap: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("literature document `{0}` has no pmcid")]
    MissingPmcid(String),
    #[error("document id `{0}` appears twice")]
    DuplicateDocument(String),
    #[error("embedder failed: {0}")]
    Embedder(String),
    #[error("reranker failed: {0}")]
    Reranker(String),
    #[error("credential environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("embedding dimension {found} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index is inconsistent: {0}")]
    Inconsistent(String),
    #[error("at most 20 candidates can be reranked, got {0}")]
    TooManyCandidates(usize),
    #[error("no chunks retrieved for the query")]
    NoContext,
    #[error("answer is not a JSON object with a `connection` key: {snippet}")]
    MalformedAnswer { snippet: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// A citation returned by the model, checked against the index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationRecord {
    pub title: String,
    pub pmcid: String,
    pub quote: String,
    pub verified: bool,
}
