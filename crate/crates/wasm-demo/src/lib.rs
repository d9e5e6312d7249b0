//! Browser bindings for three small pieces of the library: seeded diffusion
//! on a typed-in graph, BM25 ranking of pasted passages, and the confidence
//! a verdict token's log-probability implies.
//!
//! Results cross the boundary as JSON strings.

use std::sync::Arc;

use connectome_priors::gateway::{ChatResponse, TokenLogprob, Usage};
use connectome_priors::ndm::{DiffusionOperator, Normalization};
use connectome_priors::prior::confidence_from_response;
use connectome_priors::prompt::parse_classification;
use connectome_priors::rag::{tokenize, Bm25Params, Bm25Stats};
use connectome_priors::{Connectome, ConnectomeKind, Hemisphere, Parcellation};
use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("line {line}: {message}")]
    Edge { line: usize, message: String },
    #[error("unknown seed region `{0}`")]
    UnknownSeed(String),
    #[error("time must be finite and non-negative, got {0}")]
    InvalidTime(f64),
    #[error("log-probability must be finite and at most 0, got {0}")]
    InvalidLogprob(f64),
    #[error(transparent)]
    Connectome(#[from] connectome_priors::connectome::ConnectomeError),
    #[error(transparent)]
    Ndm(#[from] connectome_priors::ndm::NdmError),
    #[error("{0}")]
    Verdict(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionValue {
    pub region: String,
    pub value: f64,
}

/// Parses `a,b[,weight]` lines; regions are numbered in order of appearance.
fn parse_graph(edges: &str) -> Result<Connectome, DemoError> {
    let mut names: Vec<String> = Vec::new();
    let mut list = Vec::new();
    for (n, raw) in edges.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: &str| DemoError::Edge {
            line: n + 1,
            message: message.to_string(),
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (a, b, w) = match fields.as_slice() {
            [a, b] => (*a, *b, 1.0),
            [a, b, w] => (*a, *b, w.parse::<f64>().map_err(|_| err("weight is not a number"))?),
            _ => return Err(err("expected `region_a,region_b[,weight]`")),
        };
        if a.is_empty() || b.is_empty() || a == b {
            return Err(err("an edge needs two distinct regions"));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(err("weight must be non-negative"));
        }
        let mut index = |name: &str| match names.iter().position(|x| x == name) {
            Some(i) => i,
            None => {
                names.push(name.to_string());
                names.len() - 1
            }
        };
        let (i, j) = (index(a), index(b));
        list.push((i.min(j), i.max(j), w));
    }
    let parc = Parcellation::new("demo", names.into_iter().map(|n| (n, Hemisphere::Left)))?;
    Ok(Connectome::from_edges(Arc::new(parc), ConnectomeKind::StreamlineCount, list)?)
}

/// Concentration at time `t` after a unit seed in `seed`.
pub fn diffuse(edges: &str, seed: &str, t: f64) -> Result<Vec<RegionValue>, DemoError> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(DemoError::InvalidTime(t));
    }
    let graph = parse_graph(edges)?;
    let parc = graph.parcellation().clone();
    let s = parc.index_of(seed).ok_or_else(|| DemoError::UnknownSeed(seed.to_string()))?;
    let op = DiffusionOperator::from_connectome(&graph, Normalization::Unnormalized)?;
    let mut x0 = vec![0.0; parc.len()];
    x0[s] = 1.0;
    let x = op.simulate(&x0, t)?;
    Ok(parc
        .regions()
        .iter()
        .zip(x)
        .map(|(r, value)| RegionValue {
            region: r.name.clone(),
            value,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub passage: usize,
    pub title: String,
    pub score: f64,
}

/// Ranks blank-line separated passages by BM25; a passage's first line is
/// its title. Only passages sharing a term with the query are returned.
pub fn rank_passages(corpus: &str, query: &str, k: usize) -> Vec<Ranked> {
    let passages: Vec<&str> = corpus.split("\n\n").map(str::trim).filter(|p| !p.is_empty()).collect();
    let stats = Bm25Stats::build(&passages, Bm25Params::default());
    let q = tokenize(query);
    let mut ranked: Vec<Ranked> = passages
        .iter()
        .enumerate()
        .map(|(i, p)| Ranked {
            passage: i,
            title: p.lines().next().unwrap_or_default().to_string(),
            score: stats.score(&q, i),
        })
        .filter(|r| r.score > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.passage.cmp(&b.passage)));
    ranked.truncate(k);
    ranked
}

/// Probability of a connection implied by `answer` whose verdict token had
/// log-probability `logprob`.
pub fn verdict_confidence(answer: &str, logprob: f64) -> Result<f64, DemoError> {
    if !(logprob.is_finite() && logprob <= 0.0) {
        return Err(DemoError::InvalidLogprob(logprob));
    }
    let classification = parse_classification(answer, true).map_err(|e| DemoError::Verdict(e.to_string()))?;
    let token_logprobs = tokenize(answer)
        .into_iter()
        .map(|token| TokenLogprob { token, logprob })
        .collect();
    let response = ChatResponse {
        text: answer.to_string(),
        token_logprobs: Some(token_logprobs),
        backend_id: "demo".into(),
        latency_ms: 0,
        usage: Usage::default(),
    };
    confidence_from_response(&response, classification)
        .map(|c| c.confidence_connected)
        .map_err(|e| DemoError::Verdict(e.to_string()))
}

fn js(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = diffuse)]
pub fn diffuse_js(edges: &str, seed: &str, t: f64) -> Result<String, JsError> {
    let values = diffuse(edges, seed, t).map_err(js)?;
    Ok(serde_json::to_string(&values).expect("values serialize"))
}

#[wasm_bindgen(js_name = rankPassages)]
pub fn rank_passages_js(corpus: &str, query: &str, k: usize) -> String {
    serde_json::to_string(&rank_passages(corpus, query, k)).expect("ranking serializes")
}

#[wasm_bindgen(js_name = verdictConfidence)]
pub fn verdict_confidence_js(answer: &str, logprob: f64) -> Result<f64, JsError> {
    verdict_confidence(answer, logprob).map_err(js)
}
