use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bm25::{tokenize, Bm25Params, Bm25Stats};
use super::chunk::{split_recursive, split_semantic, SemanticChunking};
use super::embed::{cosine, Embedder, Reranker};
use super::{CitationRecord, RagError};

/// Reciprocal-rank fusion constant.
pub const RRF_K: f64 = 60.0;

const FORMAT_VERSION: u32 = 1;
const EMBED_BATCH: usize = 64;

/// An input document. Literature documents carry a pmcid; documentation
/// files may leave it empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    #[serde(default)]
    pub pmcid: String,
    pub title: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub chunk_id: String,
    pub text: String,
    pub title: String,
    pub pmcid: String,
    pub keywords: Vec<String>,
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Chunking {
    /// Literature: character windows with overlap; every document needs a pmcid.
    Recursive { chunk_size: usize, overlap: usize },
    /// Parcellation documentation: grouped sentences.
    Semantic(SemanticChunking),
}

impl Default for Chunking {
    fn default() -> Self {
        Chunking::Recursive {
            chunk_size: 2500,
            overlap: 200,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    format: u32,
    embedder_id: String,
    dim: usize,
    chunks: usize,
}

/// Chunks with their BM25 statistics and embeddings. Immutable once built.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    chunks: Vec<DocumentChunk>,
    bm25: Bm25Stats,
    embedder_id: String,
    dim: usize,
    titles: HashMap<String, String>,
}

/// Reads every `*.json` document in `dir`, in file-name order.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Vec<SourceDocument>, RagError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| RagError::Io { path, source }
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(io(&p))?;
            serde_json::from_str(&text).map_err(|source| RagError::Json { path: p, source })
        })
        .collect()
}

fn embed_all(embedder: &dyn Embedder, texts: &[&str]) -> Result<Vec<Vec<f64>>, RagError> {
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(EMBED_BATCH) {
        let vectors = embedder.embed(batch)?;
        if vectors.len() != batch.len() {
            return Err(RagError::Embedder(format!(
                "expected {} vectors, got {}",
                batch.len(),
                vectors.len()
            )));
        }
        out.extend(vectors);
    }
    Ok(out)
}

impl CorpusIndex {
    /// Chunks, embeds and indexes `documents`.
    pub fn ingest(
        documents: &[SourceDocument],
        chunking: Chunking,
        embedder: &dyn Embedder,
        params: Bm25Params,
    ) -> Result<Self, RagError> {
        if documents.is_empty() {
            return Err(RagError::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        let mut chunks = Vec::new();
        for (d, doc) in documents.iter().enumerate() {
            let key = match (&chunking, doc.pmcid.is_empty()) {
                (Chunking::Recursive { .. }, true) => return Err(RagError::MissingPmcid(doc.title.clone())),
                (_, true) => format!("doc{d:04}"),
                (_, false) => doc.pmcid.clone(),
            };
            if !seen.insert(key.clone()) {
                return Err(RagError::DuplicateDocument(key));
            }
            let pieces = match chunking {
                Chunking::Recursive { chunk_size, overlap } => split_recursive(&doc.text, chunk_size, overlap)?,
                Chunking::Semantic(settings) => split_semantic(&doc.text, &settings, Some(embedder))?,
            };
            for (ordinal, text) in pieces.into_iter().enumerate() {
                chunks.push(DocumentChunk {
                    chunk_id: format!("{key}:{ordinal:04}"),
                    text,
                    title: doc.title.clone(),
                    pmcid: doc.pmcid.clone(),
                    keywords: doc.keywords.clone(),
                    embedding: Vec::new(),
                });
            }
        }
        if chunks.is_empty() {
            return Err(RagError::EmptyCorpus);
        }
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let vectors = embed_all(embedder, &texts)?;
        let dim = embedder.dim();
        for (c, v) in chunks.iter_mut().zip(vectors) {
            if v.len() != dim {
                return Err(RagError::DimensionMismatch { expected: dim, found: v.len() });
            }
            c.embedding = v;
        }
        Ok(Self::assemble(chunks, params, embedder.id(), dim))
    }

    fn assemble(chunks: Vec<DocumentChunk>, params: Bm25Params, embedder_id: String, dim: usize) -> Self {
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let bm25 = Bm25Stats::build(&texts, params);
        let mut titles = HashMap::new();
        for c in &chunks {
            if !c.pmcid.is_empty() {
                titles.entry(c.pmcid.clone()).or_insert_with(|| c.title.clone());
            }
        }
        Self {
            chunks,
            bm25,
            embedder_id,
            dim,
            titles,
        }
    }

    pub fn chunks(&self) -> &[DocumentChunk] {
        &self.chunks
    }

    pub fn chunk(&self, i: usize) -> &DocumentChunk {
        &self.chunks[i]
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn bm25(&self) -> &Bm25Stats {
        &self.bm25
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored title for a pmcid.
    pub fn title_of(&self, pmcid: &str) -> Option<&str> {
        self.titles.get(pmcid).map(String::as_str)
    }

    /// Writes `index.json`, `chunks.jsonl`, `bm25.json` and
    /// `embeddings.bin` (little-endian f64, row-major) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), RagError> {
        let dir = dir.as_ref();
        let io = |path: PathBuf| move |source| RagError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;

        let header = IndexHeader {
            format: FORMAT_VERSION,
            embedder_id: self.embedder_id.clone(),
            dim: self.dim,
            chunks: self.chunks.len(),
        };
        let p = dir.join("index.json");
        fs::write(&p, serde_json::to_string_pretty(&header).expect("header serializes")).map_err(io(p.clone()))?;

        let p = dir.join("chunks.jsonl");
        let mut w = BufWriter::new(fs::File::create(&p).map_err(io(p.clone()))?);
        for c in &self.chunks {
            serde_json::to_writer(&mut w, c).expect("chunk serializes");
            w.write_all(b"\n").map_err(io(p.clone()))?;
        }
        w.flush().map_err(io(p.clone()))?;

        let p = dir.join("bm25.json");
        fs::write(&p, serde_json::to_string(&self.bm25).expect("stats serialize")).map_err(io(p.clone()))?;

        let p = dir.join("embeddings.bin");
        let mut bytes = Vec::with_capacity(self.chunks.len() * self.dim * 8);
        for c in &self.chunks {
            for x in &c.embedding {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(&p, bytes).map_err(io(p.clone()))?;
        Ok(())
    }

    /// Loads a saved index, checking that the stored BM25 statistics match
    /// the ones rebuilt from the chunks.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, RagError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|source| RagError::Io { path: p, source })
        };
        let json_err = |name: &str| {
            let path = dir.join(name);
            move |source| RagError::Json { path, source }
        };
        let header: IndexHeader = serde_json::from_slice(&read("index.json")?).map_err(json_err("index.json"))?;
        if header.format != FORMAT_VERSION {
            return Err(RagError::Inconsistent(format!("unsupported index format {}", header.format)));
        }
        let raw = read("chunks.jsonl")?;
        let mut chunks = Vec::new();
        for line in BufReader::new(raw.as_slice()).lines() {
            let line = line.map_err(|source| RagError::Io {
                path: dir.join("chunks.jsonl"),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let c: DocumentChunk = serde_json::from_str(&line).map_err(json_err("chunks.jsonl"))?;
            chunks.push(c);
        }
        if chunks.len() != header.chunks {
            return Err(RagError::Inconsistent(format!(
                "header lists {} chunks, found {}",
                header.chunks,
                chunks.len()
            )));
        }
        let bytes = read("embeddings.bin")?;
        if bytes.len() != header.chunks * header.dim * 8 {
            return Err(RagError::Inconsistent("embedding matrix has the wrong size".into()));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
        for c in &mut chunks {
            c.embedding = values.by_ref().take(header.dim).collect();
        }
        let stored: Bm25Stats = serde_json::from_slice(&read("bm25.json")?).map_err(json_err("bm25.json"))?;
        let index = Self::assemble(chunks, stored.params, header.embedder_id, header.dim);
        if !index.bm25.same_counts(&stored) {
            return Err(RagError::Inconsistent("BM25 statistics do not match the chunks".into()));
        }
        Ok(index)
    }
}

/// A chunk with a single retriever's score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredChunk {
    pub chunk: usize,
    pub chunk_id: String,
    pub score: f64,
}

fn ranked(index: &CorpusIndex, mut scored: Vec<(usize, f64)>, k: usize) -> Vec<ScoredChunk> {
    scored.retain(|&(_, s)| s > 0.0);
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.chunks[a.0].chunk_id.cmp(&index.chunks[b.0].chunk_id))
    });
    scored.truncate(k);
    scored
        .into_iter()
        .map(|(chunk, score)| ScoredChunk {
            chunk,
            chunk_id: index.chunks[chunk].chunk_id.clone(),
            score,
        })
        .collect()
}

/// Top `k` chunks with a positive BM25 score, ties by chunk id.
pub fn bm25_search(index: &CorpusIndex, query: &str, k: usize) -> Vec<ScoredChunk> {
    let tokens = tokenize(query);
    if tokens.is_empty() {
        return Vec::new();
    }
    let scored = (0..index.len()).map(|i| (i, index.bm25.score(&tokens, i))).collect();
    ranked(index, scored, k)
}

/// Top `k` chunks by positive cosine similarity to the query embedding.
pub fn vector_search(
    index: &CorpusIndex,
    query: &str,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredChunk>, RagError> {
    let q = embedder
        .embed(&[query])?
        .into_iter()
        .next()
        .ok_or_else(|| RagError::Embedder("no vector returned".into()))?;
    if q.len() != index.dim {
        return Err(RagError::DimensionMismatch {
            expected: index.dim,
            found: q.len(),
        });
    }
    let scored = index
        .chunks
        .iter()
        .enumerate()
        .map(|(i, c)| (i, cosine(&q, &c.embedding)))
        .collect();
    Ok(ranked(index, scored, k))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit {
    pub chunk: usize,
    pub chunk_id: String,
    pub bm25_rank: Option<u32>,
    pub vector_rank: Option<u32>,
    pub fused_score: f64,
    pub rerank_score: Option<f64>,
}

impl RetrievalHit {
    /// `Σ 1/(60 + rank)` over the ranks that are present.
    pub fn rrf(bm25_rank: Option<u32>, vector_rank: Option<u32>) -> f64 {
        [bm25_rank, vector_rank]
            .into_iter()
            .flatten()
            .map(|r| 1.0 / (RRF_K + f64::from(r)))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HybridResult {
    pub hits: Vec<RetrievalHit>,
    /// Set when the embedder failed and only keyword ranks were fused.
    pub bm25_only: Option<String>,
}

/// Fuses the BM25 and embedding rankings (each `k_candidates` deep) by
/// reciprocal rank and keeps the best `k_candidates`.
pub fn hybrid_search(
    index: &CorpusIndex,
    query: &str,
    k_candidates: usize,
    embedder: &dyn Embedder,
) -> Result<HybridResult, RagError> {
    let keyword = bm25_search(index, query, k_candidates);
    let (vector, bm25_only) = match vector_search(index, query, k_candidates, embedder) {
        Ok(v) => (v, None),
        Err(e @ RagError::DimensionMismatch { .. }) => return Err(e),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    let mut ranks: BTreeMap<usize, (Option<u32>, Option<u32>)> = BTreeMap::new();
    for (r, hit) in keyword.iter().enumerate() {
        ranks.entry(hit.chunk).or_default().0 = Some(r as u32 + 1);
    }
    for (r, hit) in vector.iter().enumerate() {
        ranks.entry(hit.chunk).or_default().1 = Some(r as u32 + 1);
    }
    let mut hits: Vec<RetrievalHit> = ranks
        .into_iter()
        .map(|(chunk, (bm25_rank, vector_rank))| RetrievalHit {
            chunk,
            chunk_id: index.chunks[chunk].chunk_id.clone(),
            bm25_rank,
            vector_rank,
            fused_score: RetrievalHit::rrf(bm25_rank, vector_rank),
            rerank_score: None,
        })
        .collect();
    hits.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score).then_with(|| a.chunk_id.cmp(&b.chunk_id)));
    hits.truncate(k_candidates);
    Ok(HybridResult { hits, bm25_only })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RerankOutcome {
    pub hits: Vec<RetrievalHit>,
    /// Why the cosine fallback was used, if it was.
    pub fallback: Option<String>,
}

/// Scores candidates with `reranker`, or with query-chunk cosine similarity
/// when none is given or it fails, and keeps the best `top`.
pub fn rerank(
    index: &CorpusIndex,
    mut hits: Vec<RetrievalHit>,
    query: &str,
    reranker: Option<&dyn Reranker>,
    embedder: &dyn Embedder,
    top: usize,
) -> Result<RerankOutcome, RagError> {
    if hits.len() > 20 {
        return Err(RagError::TooManyCandidates(hits.len()));
    }
    if hits.is_empty() {
        return Ok(RerankOutcome { hits, fallback: None });
    }
    let docs: Vec<&str> = hits.iter().map(|h| index.chunks[h.chunk].text.as_str()).collect();
    let external = match reranker {
        Some(r) => r.score(query, &docs).and_then(|s| {
            if s.len() == docs.len() && s.iter().all(|x| x.is_finite()) {
                Ok(s)
            } else {
                Err(RagError::Reranker("wrong number of scores".into()))
            }
        }),
        None => Err(RagError::Reranker("no reranker configured".into())),
    };
    let (scores, fallback) = match external {
        Ok(s) => (s, None),
        Err(e) => {
            let q = embedder
                .embed(&[query])?
                .into_iter()
                .next()
                .ok_or_else(|| RagError::Embedder("no vector returned".into()))?;
            let s = hits.iter().map(|h| cosine(&q, &index.chunks[h.chunk].embedding)).collect();
            (s, Some(e.to_string()))
        }
    };
    for (h, s) in hits.iter_mut().zip(scores) {
        h.rerank_score = Some(s);
    }
    hits.sort_by(|a, b| {
        b.rerank_score
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.rerank_score.unwrap_or(f64::NEG_INFINITY))
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
    hits.truncate(top);
    Ok(RerankOutcome { hits, fallback })
}

/// Marks a citation verified only when its pmcid is indexed and the title
/// matches the stored one, ignoring case.
pub fn verify_citations(citations: Vec<CitationRecord>, index: &CorpusIndex) -> Vec<CitationRecord> {
    citations
        .into_iter()
        .map(|mut c| {
            c.verified = index
                .title_of(&c.pmcid)
                .is_some_and(|t| t.to_lowercase() == c.title.to_lowercase());
            c
        })
        .collect()
}
