//! Network diffusion model: pathology seeded in one region spreads as
//! `x(t) = exp(-L t) x0` over a binarised connectome.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectome::{binarize, Connectome, ConnectomeError, Parcellation, SYMMETRY_TOL};
use crate::filter::FilterOutcome;

#[derive(Debug, Error)]
pub enum NdmError {
    #[error("operator is not symmetric")]
    NotSymmetric,
    #[error("vector has {found} entries, operator has {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("time must be finite and non-negative, got {0}")]
    InvalidTime(f64),
    #[error("target values must be finite")]
    NonFinite,
    #[error("no regions are included in the fit")]
    EmptyMask,
    #[error("unknown seed region `{0}`")]
    UnknownSeed(String),
    #[error("no seed region given and none (or several) match `entorhinal`: {0:?}")]
    AmbiguousSeed(Vec<String>),
    #[error("every prediction on the grid was constant over the fitted regions")]
    DegenerateFit,
    #[error("cannot add {needed} edges: only {available} pairs are absent")]
    TooFewAbsentEdges { needed: usize, available: usize },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("target CSV line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Connectome(#[from] ConnectomeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `L = D - A`
    #[default]
    Unnormalized,
    /// `L = I - D^-1/2 A D^-1/2`; isolated nodes get zero rows.
    Symmetric,
}

pub fn laplacian(c: &Connectome, normalization: Normalization) -> DMatrix<f64> {
    let a = c.weights();
    let n = a.nrows();
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    match normalization {
        Normalization::Unnormalized => DMatrix::from_fn(n, n, |i, j| if i == j { degree[i] } else { -a[(i, j)] }),
        Normalization::Symmetric => {
            let inv: Vec<f64> = degree.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
            DMatrix::from_fn(n, n, |i, j| {
                if degree[i] == 0.0 || degree[j] == 0.0 {
                    0.0
                } else if i == j {
                    1.0 - a[(i, j)] * inv[i] * inv[j]
                } else {
                    -a[(i, j)] * inv[i] * inv[j]
                }
            })
        }
    }
}

/// Eigendecomposition of a symmetric operator, reused across times.
#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl DiffusionOperator {
    pub fn new(l: &DMatrix<f64>) -> Result<Self, NdmError> {
        if !l.is_square() {
            return Err(NdmError::NotSymmetric);
        }
        let n = l.nrows();
        for i in 0..n {
            for j in i + 1..n {
                if (l[(i, j)] - l[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(NdmError::NotSymmetric);
                }
            }
        }
        let eig = SymmetricEigen::new(l.clone());
        Ok(Self {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn from_connectome(c: &Connectome, normalization: Normalization) -> Result<Self, NdmError> {
        Self::new(&laplacian(c, normalization))
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Eigenbasis coefficients of `x0`, for repeated evaluation.
    fn project(&self, x0: &[f64]) -> Result<DVector<f64>, NdmError> {
        if x0.len() != self.len() {
            return Err(NdmError::Dimension {
                expected: self.len(),
                found: x0.len(),
            });
        }
        Ok(self.eigenvectors.tr_mul(&DVector::from_column_slice(x0)))
    }

    fn evolve(&self, coeffs: &DVector<f64>, t: f64) -> DVector<f64> {
        let scaled = DVector::from_fn(coeffs.len(), |k, _| coeffs[k] * (-self.eigenvalues[k] * t).exp());
        &self.eigenvectors * scaled
    }

    /// `exp(-L t) x0`; exactly `x0` at `t = 0`.
    pub fn simulate(&self, x0: &[f64], t: f64) -> Result<Vec<f64>, NdmError> {
        if !t.is_finite() || t < 0.0 {
            return Err(NdmError::InvalidTime(t));
        }
        let coeffs = self.project(x0)?;
        if t == 0.0 {
            return Ok(x0.to_vec());
        }
        Ok(self.evolve(&coeffs, t).as_slice().to_vec())
    }
}

/// Values per region with the regions used for fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionalVector {
    #[serde(skip)]
    parcellation: Option<Arc<Parcellation>>,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl RegionalVector {
    pub fn new(parcellation: Arc<Parcellation>, values: Vec<f64>, mask: Vec<bool>) -> Result<Self, NdmError> {
        let n = parcellation.len();
        for len in [values.len(), mask.len()] {
            if len != n {
                return Err(NdmError::Dimension { expected: n, found: len });
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NdmError::NonFinite);
        }
        if !mask.iter().any(|&m| m) {
            return Err(NdmError::EmptyMask);
        }
        Ok(Self {
            parcellation: Some(parcellation),
            values,
            mask,
        })
    }

    /// Every region included.
    pub fn full(parcellation: Arc<Parcellation>, values: Vec<f64>) -> Result<Self, NdmError> {
        let mask = vec![true; values.len()];
        Self::new(parcellation, values, mask)
    }

    pub fn parcellation(&self) -> Option<&Arc<Parcellation>> {
        self.parcellation.as_ref()
    }

    /// Drops the named regions from the mask.
    pub fn excluding(mut self, names: &[String]) -> Result<Self, NdmError> {
        if let Some(p) = &self.parcellation {
            for name in names {
                let i = p.index_of(name).ok_or_else(|| ConnectomeError::UnknownRegion(name.clone()))?;
                self.mask[i] = false;
            }
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(NdmError::EmptyMask);
        }
        Ok(self)
    }

    /// Reads `region,value` rows. Regions that are missing or whose value is
    /// `NA` are left out of the mask.
    pub fn read_csv<R: Read>(input: R, parcellation: Arc<Parcellation>) -> Result<Self, NdmError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(input);
        let n = parcellation.len();
        let mut values = vec![0.0; n];
        let mut mask = vec![false; n];
        for (k, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| NdmError::Parse {
                line: k + 1,
                message: e.to_string(),
            })?;
            let line = row.position().map_or(k + 1, |p| p.line() as usize);
            let (Some(name), Some(value)) = (row.get(0), row.get(1)) else {
                return Err(NdmError::Parse {
                    line,
                    message: "expected `region,value`".into(),
                });
            };
            if k == 0 && name.eq_ignore_ascii_case("region") {
                continue;
            }
            let i = parcellation
                .index_of(name)
                .ok_or_else(|| ConnectomeError::UnknownRegion(name.to_string()))?;
            if value.eq_ignore_ascii_case("na") || value.is_empty() {
                continue;
            }
            values[i] = value.parse().map_err(|_| NdmError::Parse {
                line,
                message: format!("`{value}` is not a number"),
            })?;
            mask[i] = true;
        }
        Self::new(parcellation, values, mask)
    }

    pub fn load_csv(path: impl AsRef<Path>, parcellation: Arc<Parcellation>) -> Result<Self, NdmError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| ConnectomeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_csv(file, parcellation)
    }
}

/// Log-spaced times `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            start: 1e-3,
            end: 1e2,
            points: 200,
        }
    }
}

impl TimeGrid {
    pub fn times(&self) -> Result<Vec<f64>, NdmError> {
        if !(self.start > 0.0 && self.end >= self.start && self.end.is_finite()) || self.points == 0 {
            return Err(NdmError::InvalidGrid(format!(
                "{} points over [{}, {}]",
                self.points, self.start, self.end
            )));
        }
        if self.points == 1 {
            return Ok(vec![self.start]);
        }
        let (a, b) = (self.start.ln(), self.end.ln());
        let step = (b - a) / (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|k| {
                if k == self.points - 1 {
                    self.end
                } else {
                    (a + step * k as f64).exp()
                }
            })
            .collect())
    }
}

/// Pearson correlation over masked entries; `None` if either side is constant.
pub fn pearson(x: &[f64], y: &[f64], mask: &[bool]) -> Option<f64> {
    let idx: Vec<usize> = (0..x.len()).filter(|&i| mask[i]).collect();
    let n = idx.len() as f64;
    if idx.len() < 2 {
        return None;
    }
    let mx = idx.iter().map(|&i| x[i]).sum::<f64>() / n;
    let my = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // spread this small relative to the values is rounding noise
    let scale = |m: f64| (m.abs() * 1e-12).max(f64::MIN_POSITIVE).powi(2) * n;
    if sxx <= scale(mx) || syy <= scale(my) {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Sum of squared masked errors after the least-squares scaling of
/// `prediction` onto `target`; returns `(sse, scale)`.
pub fn scaled_sse(prediction: &[f64], target: &[f64], mask: &[bool]) -> (f64, f64) {
    let (mut pp, mut py) = (0.0, 0.0);
    for i in (0..prediction.len()).filter(|&i| mask[i]) {
        pp += prediction[i] * prediction[i];
        py += prediction[i] * target[i];
    }
    let alpha = if pp > 0.0 { py / pp } else { 0.0 };
    let sse = (0..prediction.len())
        .filter(|&i| mask[i])
        .map(|i| (target[i] - alpha * prediction[i]).powi(2))
        .sum();
    (sse, alpha)
}

/// How to fit: seed region, time grid and operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    /// Defaults to the region whose name contains "entorhinal".
    pub seed_region: Option<String>,
    pub grid: TimeGrid,
    pub normalization: Normalization,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            seed_region: None,
            grid: TimeGrid::default(),
            normalization: Normalization::Unnormalized,
        }
    }
}

pub fn resolve_seed(parcellation: &Parcellation, seed: Option<&str>) -> Result<usize, NdmError> {
    match seed {
        Some(name) => parcellation
            .index_of(name)
            .ok_or_else(|| NdmError::UnknownSeed(name.to_string())),
        None => {
            let hits: Vec<&str> = parcellation
                .regions()
                .iter()
                .map(|r| r.name.as_str())
                .filter(|n| n.to_ascii_lowercase().contains("entorhinal"))
                .collect();
            match hits.as_slice() {
                [one] => Ok(parcellation.index_of(one).expect("listed region")),
                _ => Err(NdmError::AmbiguousSeed(hits.iter().map(|s| s.to_string()).collect())),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionFit {
    pub seed_region: String,
    pub t_star: f64,
    pub t_index: usize,
    pub r: f64,
    pub sse: f64,
    /// Least-squares factor applied to the prediction for the SSE.
    pub scale: f64,
    /// Unscaled `x(t_star)`.
    pub prediction: Vec<f64>,
    pub grid: TimeGrid,
    pub normalization: Normalization,
    /// Pearson r at each grid time; `None` where the prediction was constant.
    pub r_curve: Vec<Option<f64>>,
}

fn fit_operator(
    op: &DiffusionOperator,
    seed: usize,
    target: &RegionalVector,
    times: &[f64],
) -> Result<(usize, f64, Vec<f64>, Vec<Option<f64>>), NdmError> {
    let n = op.len();
    if target.values.len() != n {
        return Err(NdmError::Dimension {
            expected: n,
            found: target.values.len(),
        });
    }
    let mut x0 = vec![0.0; n];
    x0[seed] = 1.0;
    let coeffs = op.project(&x0)?;
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut curve = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let x = op.evolve(&coeffs, t);
        let r = pearson(x.as_slice(), &target.values, &target.mask);
        curve.push(r);
        if let Some(r) = r {
            if best.as_ref().is_none_or(|(_, br, _)| r > *br) {
                best = Some((k, r, x.as_slice().to_vec()));
            }
        }
    }
    let (k, r, x) = best.ok_or(NdmError::DegenerateFit)?;
    Ok((k, r, x, curve))
}

/// Fits the seeded model to `target` over the time grid, choosing the time
/// with the highest correlation (the earliest on ties).
pub fn fit(c: &Connectome, target: &RegionalVector, settings: &FitSettings) -> Result<DiffusionFit, NdmError> {
    let parc = c.parcellation();
    let seed = resolve_seed(parc, settings.seed_region.as_deref())?;
    let op = DiffusionOperator::from_connectome(&binarize(c, 0.0), settings.normalization)?;
    let times = settings.grid.times()?;
    let (k, r, prediction, r_curve) = fit_operator(&op, seed, target, &times)?;
    let (sse, scale) = scaled_sse(&prediction, &target.values, &target.mask);
    Ok(DiffusionFit {
        seed_region: parc.regions()[seed].name.clone(),
        t_star: times[k],
        t_index: k,
        r,
        sse,
        scale,
        prediction,
        grid: settings.grid,
        normalization: settings.normalization,
        r_curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub n_added: usize,
    pub trials: usize,
    pub rng_seed: u64,
    pub observed_r: f64,
    pub observed_sse: f64,
    /// NaN where a null graph produced no usable fit.
    pub null_r: Vec<f64>,
    pub null_sse: Vec<f64>,
    pub p_r: f64,
    pub p_sse: f64,
}

impl PermutationResult {
    /// `trial,r,sse` rows.
    pub fn write_null_csv<W: Write>(&self, out: W) -> Result<(), ConnectomeError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["trial", "r", "sse"])?;
        for (k, (r, s)) in self.null_r.iter().zip(&self.null_sse).enumerate() {
            w.write_record([k.to_string(), r.to_string(), s.to_string()])?;
        }
        w.flush().map_err(|source| ConnectomeError::Io {
            path: "<csv>".into(),
            source,
        })
    }
}

fn null_trial(
    base: &DMatrix<f64>,
    absent: &[(usize, usize)],
    n_added: usize,
    rng_seed: u64,
    trial: usize,
    seed: usize,
    target: &RegionalVector,
    settings: &FitSettings,
    times: &[f64],
    parcellation: &Arc<Parcellation>,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(trial as u64);
    let mut a = base.clone();
    for k in rand::seq::index::sample(&mut rng, absent.len(), n_added) {
        let (i, j) = absent[k];
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    let graph = Connectome::new(parcellation.clone(), a, crate::connectome::ConnectomeKind::Binary)
        .expect("adding symmetric unit edges keeps the matrix valid");
    let fitted = DiffusionOperator::from_connectome(&graph, settings.normalization)
        .and_then(|op| fit_operator(&op, seed, target, times));
    match fitted {
        Ok((_, r, x, _)) => (r, scaled_sse(&x, &target.values, &target.mask).0),
        Err(_) => (f64::NAN, f64::NAN),
    }
}

/// Compares the fit of the filtered connectome against fits of `base` with
/// the same number of randomly chosen extra edges. Trial `k` draws from
/// stream `k` of a generator seeded with `rng_seed`, so results do not depend
/// on scheduling.
pub fn permutation_test(
    base: &Connectome,
    candidate: &FilterOutcome,
    target: &RegionalVector,
    settings: &FitSettings,
    trials: usize,
    rng_seed: u64,
) -> Result<PermutationResult, NdmError> {
    base.ensure_same_parcellation(candidate.filtered())?;
    let observed = fit(candidate.filtered(), target, settings)?;
    let parc = base.parcellation().clone();
    let seed = resolve_seed(&parc, settings.seed_region.as_deref())?;
    let times = settings.grid.times()?;
    let base_bin = binarize(base, 0.0);
    let n = base_bin.len();
    let absent: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| base_bin.weight(i, j) == 0.0)
        .collect();
    let n_added = candidate.n_added_by_llm();
    if n_added > absent.len() {
        return Err(NdmError::TooFewAbsentEdges {
            needed: n_added,
            available: absent.len(),
        });
    }
    let weights = base_bin.weights();
    let run = |trial: usize| null_trial(weights, &absent, n_added, rng_seed, trial, seed, target, settings, &times, &parc);

    #[cfg(feature = "parallel")]
    let nulls: Vec<(f64, f64)> = {
        use rayon::prelude::*;
        (0..trials).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let nulls: Vec<(f64, f64)> = (0..trials).map(run).collect();

    let (null_r, null_sse): (Vec<f64>, Vec<f64>) = nulls.into_iter().unzip();
    let as_good_r = null_r.iter().filter(|&&r| r >= observed.r).count();
    let as_good_sse = null_sse.iter().filter(|&&s| s <= observed.sse).count();
    let denom = (trials + 1) as f64;
    Ok(PermutationResult {
        n_added,
        trials,
        rng_seed,
        observed_r: observed.r,
        observed_sse: observed.sse,
        null_r,
        null_sse,
        p_r: (1 + as_good_r) as f64 / denom,
        p_sse: (1 + as_good_sse) as f64 / denom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::{ConnectomeKind, Hemisphere};
    use crate::prior::PriorMatrix;
    use crate::prompt::{PromptBase, PromptStrategy};
    use proptest::prelude::*;
    use rand::Rng;

    fn parc(n: usize) -> Arc<Parcellation> {
        let mut names: Vec<(String, Hemisphere)> = (0..n).map(|i| (format!("R{i:02}"), Hemisphere::Left)).collect();
        names[0].0 = "Entorhinal".into();
        Arc::new(Parcellation::new("g", names).unwrap())
    }

    fn random_graph(n: usize, density: f64, rng: &mut impl Rng) -> Connectome {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < density {
                    edges.push((i, j, 1.0));
                }
            }
        }
        Connectome::from_edges(parc(n), ConnectomeKind::Binary, edges).unwrap()
    }

    /// Taylor series of `exp(-L t)`, applied in `m` steps of `t/m` so that
    /// each step's series converges well.
    fn taylor(l: &DMatrix<f64>, x0: &[f64], t: f64) -> Vec<f64> {
        let norm = (0..l.nrows()).map(|i| l.row(i).abs().sum()).fold(0.0, f64::max);
        let m = (norm * t).ceil().max(1.0) as usize;
        let h = t / m as f64;
        let mut x = DVector::from_column_slice(x0);
        for _ in 0..m {
            let mut term = x.clone();
            let mut sum = x.clone();
            for k in 1..=30 {
                term = -(l * &term) * h / k as f64;
                sum += &term;
            }
            x = sum;
        }
        x.as_slice().to_vec()
    }

    #[test]
    fn two_node_laplacian_and_closed_form() {
        let c = Connectome::from_edges(parc(2), ConnectomeKind::Binary, [(0, 1, 1.0)]).unwrap();
        let l = laplacian(&c, Normalization::Unnormalized);
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let op = DiffusionOperator::new(&l).unwrap();
        for t in [0.0, 0.1, 0.5, 1.0, 3.0] {
            let x = op.simulate(&[1.0, 0.0], t).unwrap();
            let e = (-2.0 * t).exp();
            assert!((x[0] - (1.0 + e) / 2.0).abs() < 1e-10);
            assert!((x[1] - (1.0 - e) / 2.0).abs() < 1e-10);
        }
        assert_eq!(op.simulate(&[0.3, 0.7], 0.0).unwrap(), vec![0.3, 0.7]);
        let far = op.simulate(&[1.0, 0.0], 50.0).unwrap();
        assert!((far[0] - 0.5).abs() < 1e-12 && (far[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_graph_laplacians_are_zero() {
        let c = Connectome::zeros(parc(4), ConnectomeKind::Binary);
        assert_eq!(laplacian(&c, Normalization::Unnormalized), DMatrix::zeros(4, 4));
        assert_eq!(laplacian(&c, Normalization::Symmetric), DMatrix::zeros(4, 4));
    }

    #[test]
    fn symmetric_laplacian_has_unit_diagonal_for_connected_nodes() {
        let c = Connectome::from_edges(parc(3), ConnectomeKind::Binary, [(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let l = laplacian(&c, Normalization::Symmetric);
        assert_eq!(l[(0, 0)], 1.0);
        assert!((l[(0, 1)] + 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 1.0]);
        assert!(matches!(DiffusionOperator::new(&l), Err(NdmError::NotSymmetric)));
        let op = DiffusionOperator::new(&DMatrix::zeros(2, 2)).unwrap();
        assert!(op.simulate(&[1.0], 1.0).is_err());
        assert!(op.simulate(&[1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn matches_taylor_and_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..=20);
            let c = random_graph(n, rng.random_range(0.1..0.9), &mut rng);
            let l = laplacian(&c, Normalization::Unnormalized);
            let op = DiffusionOperator::new(&l).unwrap();
            let x0: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let t = rng.random_range(0.0..2.0);
            let x = op.simulate(&x0, t).unwrap();
            let oracle = taylor(&l, &x0, t);
            for (a, b) in x.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
            assert!((x.iter().sum::<f64>() - x0.iter().sum::<f64>()).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn semigroup(seed in 0u64..10_000, t1 in 0.0f64..3.0, t2 in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=15);
            let c = random_graph(n, 0.4, &mut rng);
            let op = DiffusionOperator::from_connectome(&c, Normalization::Unnormalized).unwrap();
            let x0: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let two_step = op.simulate(&op.simulate(&x0, t1).unwrap(), t2).unwrap();
            let one_step = op.simulate(&x0, t1 + t2).unwrap();
            for (a, b) in two_step.iter().zip(&one_step) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn grid_is_log_spaced() {
        let t = TimeGrid::default().times().unwrap();
        assert_eq!(t.len(), 200);
        assert!((t[0] - 1e-3).abs() < 1e-18);
        assert_eq!(t[199], 1e2);
        let ratio = t[1] / t[0];
        assert!((t[100] / t[99] - ratio).abs() < 1e-9);
        assert!(TimeGrid { start: 0.0, end: 1.0, points: 3 }.times().is_err());
    }

    #[test]
    fn fit_recovers_generating_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_graph(15, 0.3, &mut rng);
        let grid = TimeGrid::default();
        let times = grid.times().unwrap();
        let t0 = times[80] * 1.01;
        let op = DiffusionOperator::from_connectome(&c, Normalization::Unnormalized).unwrap();
        let mut x0 = vec![0.0; 15];
        x0[0] = 1.0;
        let target = RegionalVector::full(c.parcellation().clone(), op.simulate(&x0, t0).unwrap()).unwrap();
        let f = fit(&c, &target, &FitSettings::default()).unwrap();
        assert_eq!(f.seed_region, "Entorhinal");
        assert!(f.r >= 0.999);
        assert!(f.t_index.abs_diff(80) <= 1);

        // r does not change under affine rescaling of the target
        let shifted = RegionalVector::full(
            c.parcellation().clone(),
            target.values.iter().map(|v| 3.0 * v + 2.0).collect(),
        )
        .unwrap();
        let g = fit(&c, &shifted, &FitSettings::default()).unwrap();
        assert_eq!(g.t_index, f.t_index);
        assert!((g.r - f.r).abs() < 1e-12);
    }

    #[test]
    fn isolated_seed_is_degenerate_when_seed_is_masked() {
        let c = Connectome::zeros(parc(4), ConnectomeKind::Binary);
        let target = RegionalVector::new(c.parcellation().clone(), vec![0.0, 1.0, 2.0, 3.0], vec![false, true, true, true])
            .unwrap();
        assert!(matches!(fit(&c, &target, &FitSettings::default()), Err(NdmError::DegenerateFit)));
    }

    #[test]
    fn saturated_dense_graph_fits_worse() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 20;
        let sparse = random_graph(n, 0.15, &mut rng);
        let dense = Connectome::from_edges(
            sparse.parcellation().clone(),
            ConnectomeKind::Binary,
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j, 1.0))),
        )
        .unwrap();
        let op = DiffusionOperator::from_connectome(&sparse, Normalization::Unnormalized).unwrap();
        let mut x0 = vec![0.0; n];
        x0[0] = 1.0;
        let target = RegionalVector::full(sparse.parcellation().clone(), op.simulate(&x0, 0.8).unwrap()).unwrap();
        let good = fit(&sparse, &target, &FitSettings::default()).unwrap();
        let bad = fit(&dense, &target, &FitSettings::default()).unwrap();
        assert!(good.r > bad.r);
    }

    #[test]
    fn target_csv() {
        let p = parc(3);
        let v = RegionalVector::read_csv("region,value\nEntorhinal,1.5\nR02,NA\n".as_bytes(), p.clone()).unwrap();
        assert_eq!(v.values, vec![1.5, 0.0, 0.0]);
        assert_eq!(v.mask, vec![true, false, false]);
        assert!(RegionalVector::read_csv("Nowhere,1\n".as_bytes(), p.clone()).is_err());
        assert!(RegionalVector::read_csv("R01,abc\n".as_bytes(), p).is_err());
    }

    fn outcome(weights: &Connectome, extra: &[(usize, usize)]) -> FilterOutcome {
        let prior = Connectome::from_edges(
            weights.parcellation().clone(),
            ConnectomeKind::PriorConfidence,
            extra.iter().map(|&(i, j)| (i, j, 0.9)),
        )
        .unwrap();
        let prior = PriorMatrix::dense(prior, PromptStrategy::new(PromptBase::Minimal, false));
        crate::filter::augment_filter(weights, &prior, 0.5, None).unwrap()
    }

    #[test]
    fn no_added_edges_gives_p_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_graph(10, 0.3, &mut rng);
        let target = RegionalVector::full(base.parcellation().clone(), (0..10).map(|i| i as f64).collect()).unwrap();
        let res = permutation_test(&base, &outcome(&base, &[]), &target, &FitSettings::default(), 20, 1).unwrap();
        assert_eq!(res.n_added, 0);
        assert_eq!(res.p_r, 1.0);
        assert_eq!(res.p_sse, 1.0);
        assert!(res.null_r.iter().all(|&r| r == res.observed_r));
    }

    #[test]
    fn fixed_seed_reproduces_and_planted_edges_win() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20;
        let truth = random_graph(n, 0.2, &mut rng);
        let planted: Vec<(usize, usize)> = truth.edges().take(4).map(|(i, j, _)| (i, j)).collect();
        let mut w = truth.weights().clone();
        for &(i, j) in &planted {
            w[(i, j)] = 0.0;
            w[(j, i)] = 0.0;
        }
        let base = Connectome::new(truth.parcellation().clone(), w, ConnectomeKind::Binary).unwrap();
        let op = DiffusionOperator::from_connectome(&truth, Normalization::Unnormalized).unwrap();
        let mut x0 = vec![0.0; n];
        x0[0] = 1.0;
        let target = RegionalVector::full(base.parcellation().clone(), op.simulate(&x0, 0.7).unwrap()).unwrap();
        let cand = outcome(&base, &planted);
        assert_eq!(cand.n_added_by_llm(), 4);
        let a = permutation_test(&base, &cand, &target, &FitSettings::default(), 99, 42).unwrap();
        let b = permutation_test(&base, &cand, &target, &FitSettings::default(), 99, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.p_r <= 0.05, "p_r = {}", a.p_r);
        assert!(a.p_sse <= 0.05, "p_sse = {}", a.p_sse);
        assert_eq!(a.null_r.len(), 99);
    }

    #[test]
    fn too_many_edges_requested() {
        let n = 4;
        let full = Connectome::from_edges(
            parc(n),
            ConnectomeKind::Binary,
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j, 1.0))),
        )
        .unwrap();
        let mut w = full.weights().clone();
        w[(0, 1)] = 0.0;
        w[(1, 0)] = 0.0;
        let base = Connectome::new(full.parcellation().clone(), w, ConnectomeKind::Binary).unwrap();
        // candidate claims two additions but only one pair is absent
        let sparse = Connectome::from_edges(full.parcellation().clone(), ConnectomeKind::Binary, [(2, 3, 1.0)]).unwrap();
        let cand = outcome(&sparse, &[(0, 1), (0, 2)]);
        let target = RegionalVector::full(full.parcellation().clone(), vec![3.0, 2.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            permutation_test(&base, &cand, &target, &FitSettings::default(), 5, 0),
            Err(NdmError::TooFewAbsentEdges { needed: 2, available: 1 })
        ));
    }
}
