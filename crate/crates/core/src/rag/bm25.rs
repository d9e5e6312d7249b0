//! Okapi BM25 over lowercased alphanumeric tokens.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

/// Lowercase and split on anything that is not a letter or digit.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Corpus statistics. Term frequencies are rebuilt from the chunks on load
/// and are not part of the persisted form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Stats {
    pub params: Bm25Params,
    pub doc_len: Vec<u32>,
    pub doc_freq: BTreeMap<String, u32>,
    #[serde(skip)]
    term_freq: Vec<HashMap<String, u32>>,
}

impl Bm25Stats {
    pub fn build<S: AsRef<str>>(docs: &[S], params: Bm25Params) -> Self {
        let mut doc_len = Vec::with_capacity(docs.len());
        let mut doc_freq: BTreeMap<String, u32> = BTreeMap::new();
        let mut term_freq = Vec::with_capacity(docs.len());
        for doc in docs {
            let tokens = tokenize(doc.as_ref());
            doc_len.push(tokens.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_freq.push(tf);
        }
        Self {
            params,
            doc_len,
            doc_freq,
            term_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        if self.doc_len.is_empty() {
            return 0.0;
        }
        self.doc_len.iter().map(|&l| f64::from(l)).sum::<f64>() / self.doc_len.len() as f64
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = f64::from(self.doc_freq.get(term).copied().unwrap_or(0));
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score of document `doc` for the tokenised query. Repeated query
    /// tokens count once per occurrence.
    pub fn score(&self, query: &[String], doc: usize) -> f64 {
        let avg = self.avg_len();
        if avg == 0.0 {
            return 0.0;
        }
        let Bm25Params { k1, b } = self.params;
        let len = f64::from(self.doc_len[doc]);
        let mut total = 0.0;
        for term in query {
            let Some(&tf) = self.term_freq[doc].get(term) else {
                continue;
            };
            let tf = f64::from(tf);
            total += self.idf(term) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avg));
        }
        total
    }

    /// Statistics equal apart from the rebuilt term frequencies.
    pub fn same_counts(&self, other: &Bm25Stats) -> bool {
        self.params == other.params && self.doc_len == other.doc_len && self.doc_freq == other.doc_freq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_are_lowercased_without_stemming() {
        assert_eq!(
            tokenize("Cingulum-bundle, fibres (SLF-II)!"),
            vec!["cingulum", "bundle", "fibres", "slf", "ii"]
        );
        assert!(tokenize(" ,.;").is_empty());
    }

    #[test]
    fn worked_example() {
        let s = Bm25Stats::build(&["cingulum bundle", "cingulum cingulum fibres", "unrelated"], Bm25Params::default());
        let q = tokenize("cingulum");
        // df = 2 of N = 3 -> idf = ln(1.6); avg length 2
        let idf = 1.6f64.ln();
        assert!((s.idf("cingulum") - idf).abs() < 1e-15);
        // d1: tf 1, len 2 -> 1 * 2.2 / (1 + 1.2) = 1
        assert!((s.score(&q, 0) - idf).abs() < 1e-12);
        // d2: tf 2, len 3 -> 2 * 2.2 / (2 + 1.2 * 1.375) = 4.4 / 3.65
        assert!((s.score(&q, 1) - idf * 4.4 / 3.65).abs() < 1e-12);
        assert_eq!(s.score(&q, 2), 0.0);
    }
}
