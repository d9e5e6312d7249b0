//! Text embedders and rerankers.

use super::bm25::tokenize;
use super::RagError;

/// Maps texts to fixed-length vectors.
pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RagError>;
}

/// Scores documents against a query; higher is more relevant.
pub trait Reranker: Send + Sync {
    fn id(&self) -> String;
    fn score(&self, query: &str, documents: &[&str]) -> Result<Vec<f64>, RagError>;
}

/// Hashed bag of words, L2-normalised. Deterministic and offline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            v[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-bow-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RagError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(feature = "http")]
pub use remote::{HttpEmbedder, HttpReranker};

#[cfg(feature = "http")]
mod remote {
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::{Embedder, Reranker};
    use crate::rag::RagError;

    fn client(timeout: Duration) -> Result<reqwest::blocking::Client, RagError> {
        reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RagError::Embedder(e.to_string()))
    }

    fn key_from_env(env_var: &str) -> Result<String, RagError> {
        std::env::var(env_var)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| RagError::MissingCredential(env_var.to_string()))
    }

    fn post(client: &reqwest::blocking::Client, url: &str, key: &str, body: &Value) -> Result<Value, String> {
        let resp = client
            .post(url)
            .bearer_auth(key)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("status {}", status.as_u16()));
        }
        resp.json().map_err(|e| e.to_string())
    }

    /// OpenAI-style `/embeddings` endpoint.
    #[derive(Debug, Clone)]
    pub struct HttpEmbedder {
        endpoint: String,
        model: String,
        dim: usize,
        key: String,
        client: reqwest::blocking::Client,
    }

    impl HttpEmbedder {
        pub fn from_env(
            endpoint: impl Into<String>,
            model: impl Into<String>,
            dim: usize,
            env_var: &str,
            timeout: Duration,
        ) -> Result<Self, RagError> {
            Ok(Self {
                endpoint: endpoint.into(),
                model: model.into(),
                dim,
                key: key_from_env(env_var)?,
                client: client(timeout)?,
            })
        }
    }

    /// Reads `data[*].embedding`, ordered by `data[*].index`.
    pub fn parse_embeddings(body: &Value, expected: usize, dim: usize) -> Result<Vec<Vec<f64>>, RagError> {
        let bad = |m: &str| RagError::Embedder(m.to_string());
        let data = body.get("data").and_then(Value::as_array).ok_or_else(|| bad("missing data"))?;
        let mut rows: Vec<(u64, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(k, item)| {
                let index = item.get("index").and_then(Value::as_u64).unwrap_or(k as u64);
                let v = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| bad("missing embedding"))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric embedding")))
                    .collect::<Result<Vec<f64>, _>>()?;
                Ok((index, v))
            })
            .collect::<Result<_, RagError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        if rows.len() != expected || rows.iter().any(|(_, v)| v.len() != dim) {
            return Err(bad("embedding count or dimension mismatch"));
        }
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }

    impl Embedder for HttpEmbedder {
        fn id(&self) -> String {
            format!("http:{}:{}", self.endpoint, self.model)
        }

        fn dim(&self) -> usize {
            self.dim
        }

        fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RagError> {
            let body = post(
                &self.client,
                &self.endpoint,
                &self.key,
                &json!({ "model": self.model, "input": texts }),
            )
            .map_err(RagError::Embedder)?;
            parse_embeddings(&body, texts.len(), self.dim)
        }
    }

    /// Cohere-style `/rerank` endpoint.
    #[derive(Debug, Clone)]
    pub struct HttpReranker {
        endpoint: String,
        model: String,
        key: String,
        client: reqwest::blocking::Client,
    }

    impl HttpReranker {
        pub fn from_env(
            endpoint: impl Into<String>,
            model: impl Into<String>,
            env_var: &str,
            timeout: Duration,
        ) -> Result<Self, RagError> {
            Ok(Self {
                endpoint: endpoint.into(),
                model: model.into(),
                key: key_from_env(env_var)?,
                client: client(timeout)?,
            })
        }
    }

    /// Reads `results[*].{index, relevance_score}` into per-document scores.
    pub fn parse_rerank(body: &Value, count: usize) -> Result<Vec<f64>, RagError> {
        let bad = |m: &str| RagError::Reranker(m.to_string());
        let results = body
            .get("results")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing results"))?;
        let mut scores = vec![None; count];
        for r in results {
            let i = r.get("index").and_then(Value::as_u64).ok_or_else(|| bad("missing index"))? as usize;
            let s = r
                .get("relevance_score")
                .and_then(Value::as_f64)
                .ok_or_else(|| bad("missing relevance_score"))?;
            *scores.get_mut(i).ok_or_else(|| bad("index out of range"))? = Some(s);
        }
        scores
            .into_iter()
            .map(|s| s.ok_or_else(|| bad("document left unscored")))
            .collect()
    }

    impl Reranker for HttpReranker {
        fn id(&self) -> String {
            format!("http:{}:{}", self.endpoint, self.model)
        }

        fn score(&self, query: &str, documents: &[&str]) -> Result<Vec<f64>, RagError> {
            let body = post(
                &self.client,
                &self.endpoint,
                &self.key,
                &json!({
                    "model": self.model,
                    "query": query,
                    "documents": documents,
                    "top_n": documents.len(),
                }),
            )
            .map_err(RagError::Reranker)?;
            parse_rerank(&body, documents.len())
        }
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn embeddings_are_reordered_by_index() {
            let body = json!({"data": [
                {"index": 1, "embedding": [0.0, 1.0]},
                {"index": 0, "embedding": [1.0, 0.0]}
            ]});
            let v = parse_embeddings(&body, 2, 2).unwrap();
            assert_eq!(v[0], vec![1.0, 0.0]);
            assert!(parse_embeddings(&body, 2, 3).is_err());
        }

        #[test]
        fn rerank_results_map_to_documents() {
            let body = json!({"results": [
                {"index": 2, "relevance_score": 0.9},
                {"index": 0, "relevance_score": 0.1},
                {"index": 1, "relevance_score": 0.5}
            ]});
            assert_eq!(parse_rerank(&body, 3).unwrap(), vec![0.1, 0.5, 0.9]);
            assert!(parse_rerank(&body, 4).is_err());
        }

        #[test]
        fn credentials_come_from_the_environment() {
            let e = HttpEmbedder::from_env("http://x", "m", 8, "CONNPRIOR_TEST_NO_EMBED_KEY", Duration::from_secs(1));
            assert!(matches!(e, Err(RagError::MissingCredential(_))));
        }
    }
}
