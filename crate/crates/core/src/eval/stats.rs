//! Mann-Whitney U with exact and normal-approximation p-values.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::EvalError;

/// Group sizes up to this use the exact null distribution.
pub const EXACT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyResult {
    /// U for the first group.
    pub u: f64,
    pub p_two_sided: f64,
    pub n1: usize,
    pub n2: usize,
    pub method: PMethod,
}

impl fmt::Display for MannWhitneyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "U = {:.1}, p = {:.3e} (n1 = {}, n2 = {})", self.u, self.p_two_sided, self.n1, self.n2)
    }
}

/// Midranks of `values` (1-based), doubled so they are integers.
fn doubled_midranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share rank (i+1 + j+1)/2
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-sum test of `x` against `y`, two-sided.
pub fn mann_whitney(x: &[f64], y: &[f64]) -> Result<MannWhitneyResult, EvalError> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return Err(EvalError::DegenerateGroups { n1, n2 });
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(EvalError::DegenerateGroups { n1, n2 });
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = doubled_midranks(&pooled);
    let s_obs: u64 = ranks[..n1].iter().sum();
    let u = s_obs as f64 / 2.0 - (n1 * (n1 + 1)) as f64 / 2.0;
    let (p, method) = if n1 <= EXACT_MAX && n2 <= EXACT_MAX {
        (exact_p(&ranks, n1, s_obs), PMethod::Exact)
    } else {
        (normal_p(&pooled, n1, n2, u), PMethod::Normal)
    };
    Ok(MannWhitneyResult {
        u,
        p_two_sided: p.clamp(f64::MIN_POSITIVE, 1.0),
        n1,
        n2,
        method,
    })
}

/// Share of equally likely group assignments whose doubled rank sum is at
/// least as far from its mean as the observed one.
fn exact_p(ranks: &[u64], n1: usize, s_obs: u64) -> f64 {
    let n = ranks.len();
    let max_sum: u64 = ranks.iter().sum();
    let width = max_sum as usize + 1;
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0u64; width]; n1 + 1];
    ways[0][0] = 1;
    for &r in ranks {
        let r = r as usize;
        for k in (1..=n1).rev() {
            for s in (r..width).rev() {
                ways[k][s] += ways[k - 1][s - r];
            }
        }
    }
    let mean = (n1 * (n + 1)) as i64;
    let dev = (s_obs as i64 - mean).abs();
    let mut extreme = 0u64;
    let mut total = 0u64;
    for (s, &w) in ways[n1].iter().enumerate() {
        total += w;
        if (s as i64 - mean).abs() >= dev {
            extreme += w;
        }
    }
    extreme as f64 / total as f64
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(pooled: &[f64], n1: usize, n2: usize, u: f64) -> f64 {
    let n = (n1 + n2) as f64;
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let (a, b) = (n1 as f64, n2 as f64);
    let var = a * b / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - a * b / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z)).min(1.0)
}
