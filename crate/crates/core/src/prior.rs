//! Per-record confidences and their aggregation into an edge-prior matrix.
//!
//! A record's `confidence_connected` is the probability the model put on its
//! verdict token, flipped for `False` verdicts. "Don't know" answers count as
//! not connected with confidence 0.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectome::{Connectome, ConnectomeKind, Parcellation, RegionPair};
use crate::gateway::{ChatResponse, TokenLogprob, Usage};
use crate::prompt::{normalize_apostrophes, Classification, Ordering, PromptStrategy};
use crate::rag::CitationRecord;

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("verdict token `{0}` not found in the returned log-probabilities")]
    VerdictTokenNotFound(String),
    #[error("records mix prompt strategies ({0} and {1})")]
    MixedStrategies(String, String),
    #[error("record pair {0} does not belong to parcellation `{1}`")]
    MixedParcellations(String, String),
    #[error("no records to aggregate")]
    NoRecords,
    #[error("cutoff {0} is not a number")]
    InvalidCutoff(f64),
}

/// One model verdict for one (pair, ordering, repeat).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub pair: RegionPair,
    pub ordering: Ordering,
    pub repeat: u32,
    pub strategy: PromptStrategy,
    pub classification: Classification,
    pub verdict_token_logprob: Option<f64>,
    pub confidence_connected: f64,
    pub abstained: bool,
    #[serde(default)]
    pub no_logprobs: bool,
    pub reasoning_text: Option<String>,
    pub citations: Option<Vec<CitationRecord>>,
    pub raw_response_digest: String,
    pub model_id: String,
    pub usage: Usage,
}

impl PriorRecord {
    /// Whether this record calls the pair connected at `cutoff`.
    pub fn connected_at(&self, cutoff: f64) -> bool {
        self.confidence_connected >= cutoff
    }

    /// Probability the model assigned to its own verdict token, when known.
    pub fn verdict_confidence(&self) -> Option<f64> {
        self.verdict_token_logprob.map(f64::exp)
    }
}

/// Where to look for the verdict token in a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictSearch {
    /// The last matching token (free-text answers end with the verdict).
    Last,
    /// The first matching token after one containing this key (JSON answers).
    AfterKey(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidence {
    pub confidence_connected: f64,
    pub verdict_token_logprob: Option<f64>,
    pub abstained: bool,
    pub no_logprobs: bool,
}

fn token_word(token: &str) -> String {
    normalize_apostrophes(token)
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_ascii_lowercase()
}

fn locate(tokens: &[TokenLogprob], word: &str, search: VerdictSearch) -> Option<f64> {
    let matches = |t: &TokenLogprob| token_word(&t.token) == word;
    match search {
        VerdictSearch::Last => tokens.iter().rev().find(|t| matches(t)).map(|t| t.logprob),
        VerdictSearch::AfterKey(key) => {
            let start = tokens
                .iter()
                .position(|t| token_word(&t.token).contains(key))
                .map_or(0, |i| i + 1);
            tokens[start..]
                .iter()
                .find(|t| matches(t))
                .or_else(|| tokens.iter().rev().find(|t| matches(t)))
                .map(|t| t.logprob)
        }
    }
}

pub fn confidence_from_response(
    response: &ChatResponse,
    classification: Classification,
) -> Result<Confidence, PriorError> {
    confidence_from_response_at(response, classification, VerdictSearch::Last)
}

pub fn confidence_from_response_at(
    response: &ChatResponse,
    classification: Classification,
    search: VerdictSearch,
) -> Result<Confidence, PriorError> {
    let word = match classification {
        Classification::DontKnow => {
            return Ok(Confidence {
                confidence_connected: 0.0,
                verdict_token_logprob: None,
                abstained: true,
                no_logprobs: response.token_logprobs.is_none(),
            })
        }
        Classification::True => "true",
        Classification::False => "false",
    };
    let Some(tokens) = &response.token_logprobs else {
        let hard = if classification == Classification::True { 1.0 } else { 0.0 };
        return Ok(Confidence {
            confidence_connected: hard,
            verdict_token_logprob: None,
            abstained: false,
            no_logprobs: true,
        });
    };
    let logprob = locate(tokens, word, search)
        .ok_or_else(|| PriorError::VerdictTokenNotFound(word.to_string()))?
        .min(0.0);
    let p = logprob.exp();
    let confidence_connected = match classification {
        Classification::True => p,
        _ => 1.0 - p,
    };
    Ok(Confidence {
        confidence_connected,
        verdict_token_logprob: Some(logprob),
        abstained: false,
        no_logprobs: false,
    })
}

/// Symmetric matrix of mean `confidence_connected` per pair. Pairs without
/// records have zero support and are treated as absent.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    confidences: Connectome,
    support: DMatrix<u32>,
    strategy: PromptStrategy,
}

impl PriorMatrix {
    /// Treats every off-diagonal entry of `confidences` as observed, e.g. a
    /// prior matrix read back from CSV.
    pub fn dense(confidences: Connectome, strategy: PromptStrategy) -> Self {
        let n = confidences.len();
        let support = DMatrix::from_fn(n, n, |i, j| u32::from(i != j));
        Self {
            confidences,
            support,
            strategy,
        }
    }

    pub fn connectome(&self) -> &Connectome {
        &self.confidences
    }

    pub fn strategy(&self) -> PromptStrategy {
        self.strategy
    }

    pub fn parcellation(&self) -> &Arc<Parcellation> {
        self.confidences.parcellation()
    }

    /// Number of records averaged into the pair's entry.
    pub fn support(&self, pair: &RegionPair) -> u32 {
        let (i, j) = pair.indices();
        self.support[(i, j)]
    }

    pub fn support_at(&self, i: usize, j: usize) -> u32 {
        self.support[(i, j)]
    }

    pub fn get(&self, pair: &RegionPair) -> Option<f64> {
        (self.support(pair) > 0).then(|| self.confidences.pair_weight(pair))
    }

    /// Pairs of `expected` that received no records.
    pub fn missing_pairs<'a>(&self, expected: &'a [RegionPair]) -> Vec<&'a RegionPair> {
        expected.iter().filter(|p| self.support(p) == 0).collect()
    }

    pub fn observed_pairs(&self) -> usize {
        let n = self.support.nrows();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.support[(i, j)] > 0)
            .count()
    }
}

/// Averages records per canonical pair. The sum runs over sorted values so
/// the result does not depend on record order.
pub fn aggregate(
    records: &[PriorRecord],
    parcellation: Arc<Parcellation>,
) -> Result<PriorMatrix, PriorError> {
    let first = records.first().ok_or(PriorError::NoRecords)?;
    let strategy = first.strategy;
    let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.strategy != strategy {
            return Err(PriorError::MixedStrategies(
                strategy.to_string(),
                r.strategy.to_string(),
            ));
        }
        let belongs = [r.pair.a(), r.pair.b()]
            .iter()
            .all(|region| parcellation.regions().get(region.index) == Some(region));
        if !belongs {
            return Err(PriorError::MixedParcellations(
                r.pair.to_string(),
                parcellation.id().to_string(),
            ));
        }
        let (i, j) = r.pair.indices();
        groups
            .entry((i.min(j), i.max(j)))
            .or_default()
            .push(r.confidence_connected);
    }
    let n = parcellation.len();
    let mut support = DMatrix::zeros(n, n);
    let mut edges = Vec::with_capacity(groups.len());
    for ((i, j), mut values) in groups {
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        support[(i, j)] = values.len() as u32;
        support[(j, i)] = values.len() as u32;
        edges.push((i, j, mean));
    }
    let confidences = Connectome::from_edges(parcellation, ConnectomeKind::PriorConfidence, edges)
        .expect("means of confidences are valid weights");
    Ok(PriorMatrix {
        confidences,
        support,
        strategy,
    })
}

/// Edge is 1 iff the pair was observed and its mean confidence is at least
/// `cutoff`.
pub fn classify(matrix: &PriorMatrix, cutoff: f64) -> Result<Connectome, PriorError> {
    if cutoff.is_nan() {
        return Err(PriorError::InvalidCutoff(cutoff));
    }
    let n = matrix.support.nrows();
    let edges = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| matrix.support[(i, j)] > 0 && matrix.confidences.weight(i, j) >= cutoff)
        .map(|(i, j)| (i, j, 1.0));
    Ok(Connectome::from_edges(matrix.parcellation().clone(), ConnectomeKind::Binary, edges)
        .expect("binary edges are valid"))
}

/// Provenance written next to a prior matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorManifest {
    pub parcellation: String,
    pub strategy: PromptStrategy,
    pub model_id: String,
    pub repeats: u32,
    pub orderings: Vec<Ordering>,
    pub created_at: String,
    pub record_digests: Vec<String>,
    pub missing_pairs: Vec<RegionPair>,
    pub warnings: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::Hemisphere;
    use crate::prompt::PromptBase;
    use crate::testing::verdict_response;
    use proptest::prelude::*;

    fn parc() -> Arc<Parcellation> {
        Arc::new(
            Parcellation::new(
                "p",
                ["A", "B", "C", "D"].map(|n| (n.to_string(), Hemisphere::Left)),
            )
            .unwrap(),
        )
    }

    fn record(p: &Parcellation, a: &str, b: &str, ordering: Ordering, conf: f64) -> PriorRecord {
        PriorRecord {
            pair: p.pair(a, b).unwrap(),
            ordering,
            repeat: 0,
            strategy: PromptStrategy::new(PromptBase::Minimal, false),
            classification: if conf >= 0.5 { Classification::True } else { Classification::False },
            verdict_token_logprob: None,
            confidence_connected: conf,
            abstained: false,
            no_logprobs: false,
            reasoning_text: None,
            citations: None,
            raw_response_digest: String::new(),
            model_id: "m".into(),
            usage: Usage::default(),
        }
    }

    #[test]
    fn true_with_certain_token() {
        let r = verdict_response("True", Some(0.0), "x");
        let c = confidence_from_response(&r, Classification::True).unwrap();
        assert_eq!(c.confidence_connected, 1.0);
        assert_eq!(c.verdict_token_logprob, Some(0.0));
    }

    #[test]
    fn false_with_high_token_probability() {
        let lp = 0.989f64.ln();
        let r = verdict_response("After weighing it: False.", Some(lp), "x");
        let c = confidence_from_response(&r, Classification::False).unwrap();
        assert!((c.confidence_connected - 0.011).abs() < 1e-12);
    }

    #[test]
    fn dont_know_abstains() {
        let r = verdict_response("don't know", Some(-0.1), "x");
        let c = confidence_from_response(&r, Classification::DontKnow).unwrap();
        assert_eq!(c.confidence_connected, 0.0);
        assert!(c.abstained);
    }

    #[test]
    fn missing_logprobs_degrade_to_hard_labels() {
        let r = verdict_response("False", None, "x");
        let c = confidence_from_response(&r, Classification::False).unwrap();
        assert_eq!(c.confidence_connected, 0.0);
        assert!(c.no_logprobs);
        let r = verdict_response("True", None, "x");
        assert_eq!(confidence_from_response(&r, Classification::True).unwrap().confidence_connected, 1.0);
    }

    #[test]
    fn absent_verdict_token_is_an_error() {
        let mut r = verdict_response("Yes", Some(-0.1), "x");
        r.text = "True".into();
        assert_eq!(
            confidence_from_response(&r, Classification::True),
            Err(PriorError::VerdictTokenNotFound("true".into()))
        );
    }

    #[test]
    fn json_answers_use_the_connection_value() {
        let text = r#"{"connection": "True", "evidence": "not false at all", "citations": []}"#;
        let mut r = verdict_response(text, Some(0.0), "x");
        for t in r.token_logprobs.as_mut().unwrap() {
            if t.token.contains("True") {
                t.logprob = -0.2;
            }
        }
        let c = confidence_from_response_at(&r, Classification::True, VerdictSearch::AfterKey("connection"))
            .unwrap();
        assert_eq!(c.verdict_token_logprob, Some(-0.2));
    }

    #[test]
    fn aggregate_means() {
        let p = parc();
        let recs = vec![
            record(&p, "A", "B", Ordering::Forward, 0.9),
            record(&p, "A", "B", Ordering::Reverse, 0.1),
            record(&p, "C", "A", Ordering::Forward, 0.7),
        ];
        let m = aggregate(&recs, p.clone()).unwrap();
        let ab = p.pair("A", "B").unwrap();
        assert!((m.get(&ab).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(m.get(&p.pair("A", "C").unwrap()), Some(0.7));
        assert_eq!(m.get(&p.pair("B", "D").unwrap()), None);
        assert_eq!(m.support(&ab), 2);
        let all = crate::connectome::enumerate_pairs(&p, crate::connectome::PairScope::All);
        assert_eq!(m.missing_pairs(&all).len(), 4);

        let ones: Vec<_> = (0..4).map(|_| record(&p, "B", "D", Ordering::Forward, 1.0)).collect();
        assert_eq!(aggregate(&ones, p.clone()).unwrap().get(&p.pair("B", "D").unwrap()), Some(1.0));
    }

    #[test]
    fn aggregate_rejects_mixed_inputs() {
        let p = parc();
        let mut other = record(&p, "A", "B", Ordering::Forward, 0.9);
        other.strategy = PromptStrategy::new(PromptBase::Reasoning, false);
        let recs = vec![record(&p, "A", "B", Ordering::Forward, 0.9), other];
        assert!(matches!(aggregate(&recs, p.clone()), Err(PriorError::MixedStrategies(..))));

        let q = Arc::new(
            Parcellation::new("q", ["A", "X", "B"].map(|n| (n.to_string(), Hemisphere::Left))).unwrap(),
        );
        let foreign = record(&q, "A", "B", Ordering::Forward, 0.5);
        assert!(matches!(aggregate(&[foreign], p), Err(PriorError::MixedParcellations(..))));
    }

    #[test]
    fn classify_boundary_and_extremes() {
        let p = parc();
        let recs = vec![
            record(&p, "A", "B", Ordering::Forward, 0.5),
            record(&p, "A", "C", Ordering::Forward, 0.49),
            record(&p, "A", "D", Ordering::Forward, 0.0),
        ];
        let m = aggregate(&recs, p.clone()).unwrap();
        let b = classify(&m, 0.5).unwrap();
        assert_eq!(b.weight(0, 1), 1.0);
        assert_eq!(b.weight(0, 2), 0.0);
        assert_eq!(b.weight(0, 3), 0.0);
        assert_eq!(classify(&m, 0.0).unwrap().edge_count(), 3);
        assert_eq!(classify(&m, 1.0 + 1e-9).unwrap().edge_count(), 0);
        // unobserved pairs never become edges
        assert_eq!(classify(&m, 0.0).unwrap().weight(1, 2), 0.0);
    }

    proptest! {
        #[test]
        fn true_and_false_confidences_are_complementary(lp in -50.0f64..=0.0) {
            let t = confidence_from_response(&verdict_response("True", Some(lp), "x"), Classification::True).unwrap();
            let f = confidence_from_response(&verdict_response("False", Some(lp), "x"), Classification::False).unwrap();
            prop_assert!((t.confidence_connected + f.confidence_connected - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn aggregate_is_order_invariant(
            confs in prop::collection::vec((0usize..6, 0.0f64..=1.0), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let p = parc();
            let names = [("A", "B"), ("A", "C"), ("A", "D"), ("B", "C"), ("B", "D"), ("C", "D")];
            let recs: Vec<_> = confs
                .iter()
                .enumerate()
                .map(|(k, &(i, c))| {
                    let o = if k % 2 == 0 { Ordering::Forward } else { Ordering::Reverse };
                    record(&p, names[i].0, names[i].1, o, c)
                })
                .collect();
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            for r in shuffled.iter_mut() {
                r.ordering = match r.ordering { Ordering::Forward => Ordering::Reverse, Ordering::Reverse => Ordering::Forward };
            }
            let a = aggregate(&recs, p.clone()).unwrap();
            let b = aggregate(&shuffled, p).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
