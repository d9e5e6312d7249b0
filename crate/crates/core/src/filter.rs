//! LLM-augmented filtering: keep an edge when the microstructure fit gives
//! it weight or the model is confident it exists.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectome::{write_matrix_csv, Connectome, ConnectomeError, ConnectomeKind, Parcellation, RegionPair};
use crate::prior::PriorMatrix;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Connectome(#[from] ConnectomeError),
    #[error("cutoff {0} is not a number")]
    InvalidCutoff(f64),
}

/// Why an edge survived filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    None,
    MicrostructureOnly,
    LlmOnly,
    Both,
}

impl Provenance {
    /// 0 none, 1 microstructure only, 2 LLM only, 3 both.
    pub fn code(self) -> u8 {
        match self {
            Provenance::None => 0,
            Provenance::MicrostructureOnly => 1,
            Provenance::LlmOnly => 2,
            Provenance::Both => 3,
        }
    }

    pub fn retained(self) -> bool {
        self != Provenance::None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    filtered: Connectome,
    provenance: Vec<Provenance>,
    n_added_by_llm: usize,
    cutoff: f64,
}

impl FilterOutcome {
    /// Binary matrix of retained edges.
    pub fn filtered(&self) -> &Connectome {
        &self.filtered
    }

    pub fn parcellation(&self) -> &Arc<Parcellation> {
        self.filtered.parcellation()
    }

    pub fn provenance(&self, i: usize, j: usize) -> Provenance {
        self.provenance[i * self.filtered.len() + j]
    }

    pub fn n_added_by_llm(&self) -> usize {
        self.n_added_by_llm
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Edge counts per provenance (upper triangle).
    pub fn counts(&self) -> [(Provenance, usize); 3] {
        let n = self.filtered.len();
        let mut c = [0usize; 4];
        for i in 0..n {
            for j in i + 1..n {
                c[self.provenance(i, j).code() as usize] += 1;
            }
        }
        [
            (Provenance::MicrostructureOnly, c[1]),
            (Provenance::LlmOnly, c[2]),
            (Provenance::Both, c[3]),
        ]
    }

    /// Writes the provenance codes as a labelled CSV matrix.
    pub fn write_provenance<W: Write>(&self, out: W) -> Result<(), ConnectomeError> {
        write_matrix_csv(out, self.parcellation(), |i, j| self.provenance(i, j).code())
    }
}

/// Applies the union rule. An edge is kept when its weight sum is positive
/// or its prior reaches `cutoff`; with `unfiltered` given, prior-only edges
/// must also exist in the unfiltered tractogram.
pub fn augment_filter(
    weights: &Connectome,
    priors: &PriorMatrix,
    cutoff: f64,
    unfiltered: Option<&Connectome>,
) -> Result<FilterOutcome, FilterError> {
    if cutoff.is_nan() {
        return Err(FilterError::InvalidCutoff(cutoff));
    }
    weights.ensure_same_parcellation(priors.connectome())?;
    if let Some(u) = unfiltered {
        weights.ensure_same_parcellation(u)?;
    }
    let n = weights.len();
    let mut provenance = vec![Provenance::None; n * n];
    let mut edges = Vec::new();
    let mut n_added_by_llm = 0;
    for i in 0..n {
        for j in i + 1..n {
            let micro = weights.weight(i, j) > 0.0;
            let observed = priors.support_at(i, j) > 0;
            let confident = observed && priors.connectome().weight(i, j) >= cutoff;
            let exists = unfiltered.is_none_or(|u| u.weight(i, j) > 0.0);
            let p = match (micro, confident) {
                (true, true) => Provenance::Both,
                (true, false) => Provenance::MicrostructureOnly,
                (false, true) if exists => Provenance::LlmOnly,
                _ => Provenance::None,
            };
            if p == Provenance::LlmOnly {
                n_added_by_llm += 1;
            }
            if p.retained() {
                edges.push((i, j, 1.0));
            }
            provenance[i * n + j] = p;
            provenance[j * n + i] = p;
        }
    }
    let filtered = Connectome::from_edges(weights.parcellation().clone(), ConnectomeKind::Binary, edges)?;
    Ok(FilterOutcome {
        filtered,
        provenance,
        n_added_by_llm,
        cutoff,
    })
}

/// Edges kept only because of the prior, in canonical order.
pub fn added_edges(outcome: &FilterOutcome) -> Vec<RegionPair> {
    let parc = outcome.parcellation();
    let regions = parc.regions();
    let n = regions.len();
    let mut pairs: Vec<RegionPair> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| outcome.provenance(i, j) == Provenance::LlmOnly)
        .map(|(i, j)| RegionPair::new(regions[i].clone(), regions[j].clone()).expect("distinct regions"))
        .collect();
    pairs.sort();
    pairs
}
