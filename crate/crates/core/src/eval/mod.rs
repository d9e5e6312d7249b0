//! Balanced evaluation sets built from an atlas connectome and the scores
//! computed against them.

mod cost;
mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectome::{enumerate_pairs, Connectome, ConnectomeError, PairScope, Parcellation, RegionPair};
use crate::prior::{aggregate, PriorError, PriorMatrix, PriorRecord};
use crate::prompt::Ordering;

pub use cost::{cost_report, CostLine, CostReport, Price, PriceTable};
pub use stats::{mann_whitney, MannWhitneyResult, PMethod, EXACT_MAX};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("atlas has {found} within-hemisphere connected pairs, {needed} needed")]
    InsufficientPositives { needed: usize, found: usize },
    #[error("atlas has {found} unconnected within-hemisphere pairs, {needed} needed")]
    InsufficientNegatives { needed: usize, found: usize },
    #[error("no verdict for {} evaluation pair(s), first {}", .0.len(), .0[0])]
    MissingVerdicts(Vec<String>),
    #[error("evaluation set is invalid: {0}")]
    InvalidSet(String),
    #[error("need at least two replicates, found {0}")]
    TooFewReplicates(usize),
    #[error("rank-sum groups must both be non-empty and finite (sizes {n1} and {n2})")]
    DegenerateGroups { n1: usize, n2: usize },
    #[error("no price for model `{0}`")]
    MissingPrice(String),
    #[error("price table: {0}")]
    Prices(String),
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("evaluation set JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Connectome(#[from] ConnectomeError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Mean and population standard deviation; zeros for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Labelled pairs: the strongest atlas connections and randomly drawn
/// unconnected pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSet {
    parcellation: Arc<Parcellation>,
    positives: Vec<RegionPair>,
    negatives: Vec<RegionPair>,
    source_connectome: String,
    rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct LabelledPair {
    region_a: String,
    region_b: String,
    connected: bool,
}

#[derive(Serialize, Deserialize)]
struct EvalSetFile {
    parcellation: String,
    source_connectome: String,
    rng_seed: u64,
    pairs: Vec<LabelledPair>,
}

impl EvaluationSet {
    pub fn new(
        parcellation: Arc<Parcellation>,
        positives: Vec<RegionPair>,
        negatives: Vec<RegionPair>,
        source_connectome: impl Into<String>,
        rng_seed: u64,
    ) -> Result<Self, EvalError> {
        if positives.iter().any(|p| negatives.contains(p)) {
            return Err(EvalError::InvalidSet("a pair is both positive and negative".into()));
        }
        let mut all: Vec<&RegionPair> = positives.iter().chain(&negatives).collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(EvalError::InvalidSet("duplicate pair".into()));
        }
        Ok(Self {
            parcellation,
            positives,
            negatives,
            source_connectome: source_connectome.into(),
            rng_seed,
        })
    }

    pub fn parcellation(&self) -> &Arc<Parcellation> {
        &self.parcellation
    }

    pub fn positives(&self) -> &[RegionPair] {
        &self.positives
    }

    pub fn negatives(&self) -> &[RegionPair] {
        &self.negatives
    }

    pub fn source_connectome(&self) -> &str {
        &self.source_connectome
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every pair with its atlas label, positives first.
    pub fn labelled(&self) -> impl Iterator<Item = (&RegionPair, bool)> {
        self.positives
            .iter()
            .map(|p| (p, true))
            .chain(self.negatives.iter().map(|p| (p, false)))
    }

    /// All pairs in canonical order.
    pub fn pairs(&self) -> Vec<RegionPair> {
        let mut v: Vec<RegionPair> = self.labelled().map(|(p, _)| p.clone()).collect();
        v.sort();
        v
    }

    pub fn label(&self, pair: &RegionPair) -> Option<bool> {
        self.labelled().find(|(p, _)| p.key() == pair.key()).map(|(_, l)| l)
    }

    pub fn to_json(&self) -> String {
        let file = EvalSetFile {
            parcellation: self.parcellation.id().to_string(),
            source_connectome: self.source_connectome.clone(),
            rng_seed: self.rng_seed,
            pairs: self
                .labelled()
                .map(|(p, connected)| LabelledPair {
                    region_a: p.a().name.clone(),
                    region_b: p.b().name.clone(),
                    connected,
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("eval set serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, parcellation: Arc<Parcellation>) -> Result<Self, EvalError> {
        let file: EvalSetFile = serde_json::from_str(text)?;
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for p in file.pairs {
            let pair = parcellation.pair(&p.region_a, &p.region_b)?;
            if p.connected {
                positives.push(pair);
            } else {
                negatives.push(pair);
            }
        }
        Self::new(parcellation, positives, negatives, file.source_connectome, file.rng_seed)
    }

    pub fn load(path: impl AsRef<Path>, parcellation: Arc<Parcellation>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, parcellation)
    }
}

/// Positives are the `n_pos` strongest within-hemisphere pairs (ties by
/// canonical name); negatives are `n_neg` within-hemisphere pairs with no
/// streamlines, drawn uniformly without replacement.
pub fn build_eval_set(
    atlas: &Connectome,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
    source_label: &str,
) -> Result<EvaluationSet, EvalError> {
    let parcellation = atlas.parcellation().clone();
    let pairs = enumerate_pairs(&parcellation, PairScope::WithinHemisphere);
    let (mut connected, unconnected): (Vec<(RegionPair, f64)>, Vec<(RegionPair, f64)>) = pairs
        .into_iter()
        .map(|p| {
            let w = atlas.pair_weight(&p);
            (p, w)
        })
        .partition(|(_, w)| *w > 0.0);
    if connected.len() < n_pos {
        return Err(EvalError::InsufficientPositives {
            needed: n_pos,
            found: connected.len(),
        });
    }
    if unconnected.len() < n_neg {
        return Err(EvalError::InsufficientNegatives {
            needed: n_neg,
            found: unconnected.len(),
        });
    }
    connected.sort_by(|(pa, wa), (pb, wb)| wb.total_cmp(wa).then_with(|| pa.cmp(pb)));
    let positives = connected.into_iter().take(n_pos).map(|(p, _)| p).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, unconnected.len(), n_neg).into_vec();
    picked.sort_unstable();
    let negatives = picked.into_iter().map(|i| unconnected[i].0.clone()).collect();
    EvaluationSet::new(parcellation, positives, negatives, source_label, seed)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, label: bool, predicted: bool) {
        match (label, predicted) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn fp_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fn_rate(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScore {
    pub ordering: Ordering,
    pub repeat: u32,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

/// A value with its spread across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for Spread {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

impl Spread {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mean, std) = mean_std(&values.collect::<Vec<_>>());
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub cutoff: f64,
    /// Scores of the aggregated prior matrix.
    pub confusion: Confusion,
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub replicates: Vec<ReplicateScore>,
    pub accuracy_spread: Spread,
    pub fp_spread: Spread,
    pub fn_spread: Spread,
}

/// Scores a prior matrix; every evaluation pair must have been observed.
pub fn score_matrix(matrix: &PriorMatrix, eval: &EvaluationSet, cutoff: f64) -> Result<Confusion, EvalError> {
    if cutoff.is_nan() {
        return Err(PriorError::InvalidCutoff(cutoff).into());
    }
    let missing: Vec<String> = eval
        .labelled()
        .filter(|(p, _)| matrix.support(p) == 0)
        .map(|(p, _)| p.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingVerdicts(missing));
    }
    let mut c = Confusion::default();
    for (p, label) in eval.labelled() {
        c.add(label, matrix.get(p).expect("observed") >= cutoff);
    }
    Ok(c)
}

/// Records restricted to evaluation pairs, grouped by replicate.
fn replicates<'r>(
    records: &'r [PriorRecord],
    eval: &EvaluationSet,
) -> BTreeMap<(Ordering, u32), BTreeMap<(String, String), &'r PriorRecord>> {
    let mut reps: BTreeMap<(Ordering, u32), BTreeMap<(String, String), &PriorRecord>> = BTreeMap::new();
    for r in records {
        if eval.label(&r.pair).is_none() {
            continue;
        }
        let (a, b) = r.pair.key();
        reps.entry((r.ordering, r.repeat))
            .or_default()
            .entry((a.to_string(), b.to_string()))
            .or_insert(r);
    }
    reps
}

/// Scores the aggregated matrix and every (ordering, repeat) replicate.
pub fn score_run(records: &[PriorRecord], eval: &EvaluationSet, cutoff: f64) -> Result<RunScore, EvalError> {
    let relevant: Vec<PriorRecord> = records.iter().filter(|r| eval.label(&r.pair).is_some()).cloned().collect();
    if relevant.is_empty() {
        return Err(EvalError::MissingVerdicts(eval.pairs().iter().map(ToString::to_string).collect()));
    }
    let matrix = aggregate(&relevant, eval.parcellation().clone())?;
    let confusion = score_matrix(&matrix, eval, cutoff)?;

    let mut reps = Vec::new();
    for ((ordering, repeat), by_pair) in replicates(&relevant, eval) {
        let mut c = Confusion::default();
        let mut missing = Vec::new();
        for (p, label) in eval.labelled() {
            let (a, b) = p.key();
            match by_pair.get(&(a.to_string(), b.to_string())) {
                Some(r) => c.add(label, r.connected_at(cutoff)),
                None => missing.push(format!("{p} ({ordering:?}, repeat {repeat})")),
            }
        }
        if !missing.is_empty() {
            return Err(EvalError::MissingVerdicts(missing));
        }
        reps.push(ReplicateScore {
            ordering,
            repeat,
            accuracy: c.accuracy(),
            fp_rate: c.fp_rate(),
            fn_rate: c.fn_rate(),
            confusion: c,
        });
    }
    Ok(RunScore {
        cutoff,
        accuracy: confusion.accuracy(),
        fp_rate: confusion.fp_rate(),
        fn_rate: confusion.fn_rate(),
        confusion,
        accuracy_spread: Spread::of(reps.iter().map(|r| r.accuracy)),
        fp_spread: Spread::of(reps.iter().map(|r| r.fp_rate)),
        fn_spread: Spread::of(reps.iter().map(|r| r.fn_rate)),
        replicates: reps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingFlip {
    pub pair: String,
    pub forward: bool,
    pub reverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub n_pairs: usize,
    pub n_consistent: usize,
    pub accuracy_min: f64,
    pub accuracy_max: f64,
    /// Pairs whose verdict is fixed within each ordering but differs between them.
    pub ordering_determined: Vec<OrderingFlip>,
    /// Pairs whose verdict changes between repeats of the same ordering.
    pub within_ordering_flips: Vec<String>,
}

/// Verdict agreement across replicates.
pub fn stability_report(
    records: &[PriorRecord],
    eval: &EvaluationSet,
    cutoff: f64,
) -> Result<StabilityReport, EvalError> {
    let score = score_run(records, eval, cutoff)?;
    if score.replicates.len() < 2 {
        return Err(EvalError::TooFewReplicates(score.replicates.len()));
    }
    let mut verdicts: BTreeMap<(String, String), (String, Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for by_pair in replicates(records, eval).into_values() {
        for (key, r) in by_pair {
            let entry = verdicts
                .entry(key)
                .or_insert_with(|| (r.pair.to_string(), Vec::new(), Vec::new()));
            let v = r.connected_at(cutoff);
            match r.ordering {
                Ordering::Forward => entry.1.push(v),
                Ordering::Reverse => entry.2.push(v),
            }
        }
    }
    let uniform = |v: &[bool]| v.windows(2).all(|w| w[0] == w[1]);
    let mut n_consistent = 0;
    let mut ordering_determined = Vec::new();
    let mut within_ordering_flips = Vec::new();
    for (name, fwd, rev) in verdicts.values() {
        let all: Vec<bool> = fwd.iter().chain(rev).copied().collect();
        if uniform(&all) {
            n_consistent += 1;
        } else if uniform(fwd) && uniform(rev) && !fwd.is_empty() && !rev.is_empty() {
            ordering_determined.push(OrderingFlip {
                pair: name.clone(),
                forward: fwd[0],
                reverse: rev[0],
            });
        } else {
            within_ordering_flips.push(name.clone());
        }
    }
    let accs = score.replicates.iter().map(|r| r.accuracy);
    Ok(StabilityReport {
        n_pairs: verdicts.len(),
        n_consistent,
        accuracy_min: accs.clone().fold(f64::INFINITY, f64::min),
        accuracy_max: accs.fold(f64::NEG_INFINITY, f64::max),
        ordering_determined,
        within_ordering_flips,
    })
}

/// Rank-sum comparison of the model's confidence in its own verdict between
/// records that agree with the atlas and records that do not. Records
/// without a verdict probability are left out.
pub fn confidence_separation(
    records: &[PriorRecord],
    eval: &EvaluationSet,
    cutoff: f64,
) -> Result<MannWhitneyResult, EvalError> {
    let mut agree = Vec::new();
    let mut diverge = Vec::new();
    for r in records {
        let (Some(label), Some(conf)) = (eval.label(&r.pair), r.verdict_confidence()) else {
            continue;
        };
        if r.abstained {
            continue;
        }
        if r.connected_at(cutoff) == label {
            agree.push(conf);
        } else {
            diverge.push(conf);
        }
    }
    mann_whitney(&agree, &diverge)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementRow {
    pub pair: String,
    pub atlas_connected: bool,
    /// Mean confidence in the model's own verdict, when known.
    pub mean_confidence: Option<f64>,
    pub records: usize,
}

/// Pairs the model gets wrong in at least `min_fraction` of its records
/// (1.0 means every record), by ascending mean confidence.
pub fn disagreement_report(
    records: &[PriorRecord],
    eval: &EvaluationSet,
    cutoff: f64,
    min_fraction: f64,
) -> Vec<DisagreementRow> {
    let mut groups: BTreeMap<(String, String), Vec<&PriorRecord>> = BTreeMap::new();
    for r in records {
        if eval.label(&r.pair).is_some() {
            let (a, b) = r.pair.key();
            groups.entry((a.to_string(), b.to_string())).or_default().push(r);
        }
    }
    let mut rows: Vec<DisagreementRow> = groups
        .into_values()
        .filter_map(|recs| {
            let label = eval.label(&recs[0].pair)?;
            let wrong = recs.iter().filter(|r| r.connected_at(cutoff) != label).count();
            if (wrong as f64) < min_fraction * recs.len() as f64 || wrong == 0 {
                return None;
            }
            let mut confs: Vec<f64> = recs.iter().filter_map(|r| r.verdict_confidence()).collect();
            confs.sort_by(f64::total_cmp);
            let mean_confidence = (!confs.is_empty()).then(|| confs.iter().sum::<f64>() / confs.len() as f64);
            Some(DisagreementRow {
                pair: recs[0].pair.to_string(),
                atlas_connected: label,
                mean_confidence,
                records: recs.len(),
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &DisagreementRow| r.mean_confidence.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then_with(|| a.pair.cmp(&b.pair))
    });
    rows
}

/// Everything `evaluate` reports for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub strategy: String,
    pub model_id: String,
    pub score: RunScore,
    pub stability: Option<StabilityReport>,
    pub separation: Option<MannWhitneyResult>,
    pub disagreements: Vec<DisagreementRow>,
    pub cost: Option<CostReport>,
}

impl EvaluationReport {
    /// Human-readable summary tables.
    pub fn to_markdown(&self) -> String {
        let s = &self.score;
        let mut out = String::new();
        let _ = writeln!(out, "# {} ({})\n", self.strategy, self.model_id);
        let _ = writeln!(out, "| metric | aggregate | replicates |");
        let _ = writeln!(out, "|---|---|---|");
        let _ = writeln!(out, "| accuracy | {:.4} | {} |", s.accuracy, s.accuracy_spread);
        let _ = writeln!(out, "| false positive rate | {:.4} | {} |", s.fp_rate, s.fp_spread);
        let _ = writeln!(out, "| false negative rate | {:.4} | {} |", s.fn_rate, s.fn_spread);
        let c = s.confusion;
        let _ = writeln!(
            out,
            "\nTP {} / TN {} / FP {} / FN {} at cutoff {}",
            c.tp, c.tn, c.fp, c.fn_, s.cutoff
        );
        let _ = writeln!(out, "\n| ordering | repeat | accuracy | FP rate | FN rate |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        for r in &s.replicates {
            let _ = writeln!(
                out,
                "| {:?} | {} | {:.4} | {:.4} | {:.4} |",
                r.ordering, r.repeat, r.accuracy, r.fp_rate, r.fn_rate
            );
        }
        if let Some(st) = &self.stability {
            let _ = writeln!(
                out,
                "\nConsistent verdicts for {} of {} pairs; replicate accuracy {:.2} to {:.2}.",
                st.n_consistent, st.n_pairs, st.accuracy_min, st.accuracy_max
            );
            for f in &st.ordering_determined {
                let _ = writeln!(out, "- {} follows ordering (forward {}, reverse {})", f.pair, f.forward, f.reverse);
            }
        }
        if let Some(m) = &self.separation {
            let _ = writeln!(out, "\nConfidence separation: {m}");
        }
        if !self.disagreements.is_empty() {
            let _ = writeln!(out, "\n| pair | atlas connected | mean confidence |");
            let _ = writeln!(out, "|---|---|---|");
            for d in &self.disagreements {
                let conf = d.mean_confidence.map_or("n/a".to_string(), |c| format!("{c:.3}"));
                let _ = writeln!(out, "| {} | {} | {} |", d.pair, d.atlas_connected, conf);
            }
        }
        if let Some(cost) = &self.cost {
            let _ = writeln!(out, "\n| strategy | model | input tokens | output tokens | cost | per pass |");
            let _ = writeln!(out, "|---|---|---|---|---|---|");
            for l in &cost.lines {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {:.4} | {:.2} ± {:.2} |",
                    l.strategy, l.model_id, l.input_tokens, l.output_tokens, l.cost, l.replicate_mean, l.replicate_std
                );
            }
        }
        out
    }
}
