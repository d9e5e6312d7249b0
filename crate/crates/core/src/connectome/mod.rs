//! Parcellations, region pairs and connectome matrices.
//!
//! Everything here is immutable once built. A [`Connectome`] always holds a
//! symmetric, zero-diagonal, non-negative matrix whose size matches its
//! parcellation.

mod io;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{
    load_endpoints, load_parcellation, parse_endpoints, parse_parcellation, read_connectome,
    write_connectome, write_matrix_csv,
};

/// Symmetry tolerance used when validating matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ConnectomeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate region name `{0}`")]
    DuplicateRegion(String),
    #[error("unknown hemisphere `{0}` (expected left, right or midline)")]
    UnknownHemisphere(String),
    #[error("parcellation is empty")]
    Empty,
    #[error("parcellation needs at least 2 regions, got {0}")]
    TooFewRegions(usize),
    #[error("region name must be non-empty")]
    EmptyName,
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("a region pair needs two distinct regions, got `{0}` twice")]
    SelfPair(String),
    #[error("matrix is {rows}x{cols} but the parcellation has {expected} regions")]
    Dimension {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("matrix diagonal must be zero (entry {0})")]
    NonZeroDiagonal(usize),
    #[error("matrix entry ({0}, {1}) is negative or not finite")]
    InvalidWeight(usize, usize),
    #[error("binary connectome entry ({0}, {1}) is not 0 or 1")]
    NotBinary(usize, usize),
    #[error("parcellation mismatch: `{0}` vs `{1}`")]
    ParcellationMismatch(String, String),
}

pub type Result<T, E = ConnectomeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hemisphere {
    Left,
    Right,
    Midline,
}

impl FromStr for Hemisphere {
    type Err = ConnectomeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" | "lh" => Ok(Hemisphere::Left),
            "right" | "r" | "rh" => Ok(Hemisphere::Right),
            "midline" | "m" | "mid" => Ok(Hemisphere::Midline),
            _ => Err(ConnectomeError::UnknownHemisphere(s.trim().to_string())),
        }
    }
}

impl fmt::Display for Hemisphere {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hemisphere::Left => "Left",
            Hemisphere::Right => "Right",
            Hemisphere::Midline => "Midline",
        })
    }
}

impl Hemisphere {
    /// Whether a pair with these two hemispheres counts as within-hemisphere.
    /// Midline regions pair with either side.
    pub fn shares_with(self, other: Hemisphere) -> bool {
        self == other || self == Hemisphere::Midline || other == Hemisphere::Midline
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub hemisphere: Hemisphere,
    pub index: usize,
}

/// An ordered, validated list of named regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parcellation {
    id: String,
    regions: Vec<Region>,
    by_name: HashMap<String, usize>,
}

impl Parcellation {
    /// Builds a parcellation from `(name, hemisphere)` entries in order.
    pub fn new(
        id: impl Into<String>,
        entries: impl IntoIterator<Item = (String, Hemisphere)>,
    ) -> Result<Self> {
        let mut regions = Vec::new();
        let mut by_name = HashMap::new();
        for (index, (name, hemisphere)) in entries.into_iter().enumerate() {
            if name.is_empty() {
                return Err(ConnectomeError::EmptyName);
            }
            if by_name.insert(name.clone(), index).is_some() {
                return Err(ConnectomeError::DuplicateRegion(name));
            }
            regions.push(Region {
                name,
                hemisphere,
                index,
            });
        }
        match regions.len() {
            0 => Err(ConnectomeError::Empty),
            n if n < 2 => Err(ConnectomeError::TooFewRegions(n)),
            _ => Ok(Self {
                id: id.into(),
                regions,
                by_name,
            }),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region(&self, name: &str) -> Result<&Region> {
        self.by_name
            .get(name)
            .map(|&i| &self.regions[i])
            .ok_or_else(|| ConnectomeError::UnknownRegion(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Resolves two names into a canonical pair.
    pub fn pair(&self, a: &str, b: &str) -> Result<RegionPair> {
        RegionPair::new(self.region(a)?.clone(), self.region(b)?.clone())
    }

    /// True when `other` lists the same regions in the same order.
    pub fn same_regions(&self, other: &Parcellation) -> bool {
        self.regions == other.regions
    }
}

/// An unordered pair of distinct regions, stored with `a.name < b.name`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct RegionPair {
    a: Region,
    b: Region,
}

#[derive(Deserialize)]
struct RawPair {
    a: Region,
    b: Region,
}

impl TryFrom<RawPair> for RegionPair {
    type Error = ConnectomeError;

    fn try_from(raw: RawPair) -> Result<Self> {
        RegionPair::new(raw.a, raw.b)
    }
}

impl RegionPair {
    pub fn new(x: Region, y: Region) -> Result<Self> {
        if x.name == y.name {
            return Err(ConnectomeError::SelfPair(x.name));
        }
        if x.name < y.name {
            Ok(Self { a: x, b: y })
        } else {
            Ok(Self { a: y, b: x })
        }
    }

    pub fn a(&self) -> &Region {
        &self.a
    }

    pub fn b(&self) -> &Region {
        &self.b
    }

    /// The canonical sort key: names in ascending order.
    pub fn key(&self) -> (&str, &str) {
        (&self.a.name, &self.b.name)
    }

    pub fn indices(&self) -> (usize, usize) {
        (self.a.index, self.b.index)
    }

    pub fn within_hemisphere(&self) -> bool {
        self.a.hemisphere.shares_with(self.b.hemisphere)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.a.name == name || self.b.name == name
    }
}

impl PartialOrd for RegionPair {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for RegionPair {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Display for RegionPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} & {}", self.a.name, self.b.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScope {
    WithinHemisphere,
    All,
}

/// All unique unordered pairs of `p`, in canonical order.
pub fn enumerate_pairs(p: &Parcellation, scope: PairScope) -> Vec<RegionPair> {
    let regions = p.regions();
    let mut pairs = Vec::with_capacity(regions.len() * (regions.len() - 1) / 2);
    for (i, x) in regions.iter().enumerate() {
        for y in &regions[i + 1..] {
            if scope == PairScope::WithinHemisphere && !x.hemisphere.shares_with(y.hemisphere) {
                continue;
            }
            // names are unique, so this cannot fail
            pairs.push(RegionPair::new(x.clone(), y.clone()).expect("distinct regions"));
        }
    }
    pairs.sort();
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectomeKind {
    StreamlineCount,
    Commit2WeightSum,
    Binary,
    PriorConfidence,
}

/// A symmetric, zero-diagonal, non-negative weight matrix over a parcellation.
#[derive(Debug, Clone, PartialEq)]
pub struct Connectome {
    parcellation: Arc<Parcellation>,
    weights: DMatrix<f64>,
    kind: ConnectomeKind,
}

impl Connectome {
    pub fn new(
        parcellation: Arc<Parcellation>,
        weights: DMatrix<f64>,
        kind: ConnectomeKind,
    ) -> Result<Self> {
        let n = parcellation.len();
        if weights.nrows() != n || weights.ncols() != n {
            return Err(ConnectomeError::Dimension {
                rows: weights.nrows(),
                cols: weights.ncols(),
                expected: n,
            });
        }
        for i in 0..n {
            if weights[(i, i)] != 0.0 {
                return Err(ConnectomeError::NonZeroDiagonal(i));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(ConnectomeError::InvalidWeight(i, j));
                }
                if j > i && (w - weights[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(ConnectomeError::NotSymmetric(i, j));
                }
                if kind == ConnectomeKind::Binary && w != 0.0 && w != 1.0 {
                    return Err(ConnectomeError::NotBinary(i, j));
                }
            }
        }
        Ok(Self {
            parcellation,
            weights,
            kind,
        })
    }

    pub fn zeros(parcellation: Arc<Parcellation>, kind: ConnectomeKind) -> Self {
        let n = parcellation.len();
        Self {
            parcellation,
            weights: DMatrix::zeros(n, n),
            kind,
        }
    }

    /// Builds a connectome from upper-triangle edge values; the matrix is
    /// mirrored.
    pub fn from_edges(
        parcellation: Arc<Parcellation>,
        kind: ConnectomeKind,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let n = parcellation.len();
        let mut weights = DMatrix::zeros(n, n);
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(ConnectomeError::Dimension {
                    rows: i.max(j) + 1,
                    cols: i.max(j) + 1,
                    expected: n,
                });
            }
            weights[(i, j)] = w;
            weights[(j, i)] = w;
        }
        Self::new(parcellation, weights, kind)
    }

    pub fn parcellation(&self) -> &Arc<Parcellation> {
        &self.parcellation
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn kind(&self) -> ConnectomeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn pair_weight(&self, pair: &RegionPair) -> f64 {
        let (i, j) = pair.indices();
        self.weights[(i, j)]
    }

    /// Upper-triangle entries `(i, j, w)` with `w > 0`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.len();
        (0..n).flat_map(move |i| {
            (i + 1..n).filter_map(move |j| {
                let w = self.weights[(i, j)];
                (w > 0.0).then_some((i, j, w))
            })
        })
    }

    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }

    pub fn ensure_same_parcellation(&self, other: &Connectome) -> Result<()> {
        if self.parcellation.same_regions(&other.parcellation) {
            Ok(())
        } else {
            Err(ConnectomeError::ParcellationMismatch(
                self.parcellation.id().to_string(),
                other.parcellation.id().to_string(),
            ))
        }
    }
}

/// One row of an endpoint table: streamlines terminating in two regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointRow {
    pub region_a: String,
    pub region_b: String,
    pub count: u64,
}

pub type EndpointTable = Vec<EndpointRow>;

/// Accumulates endpoint rows into a symmetric streamline-count matrix.
/// Rows naming the same region twice are self-connections and are dropped.
pub fn connectome_from_endpoints(
    table: &[EndpointRow],
    parcellation: Arc<Parcellation>,
) -> Result<Connectome> {
    let n = parcellation.len();
    let mut counts = vec![0u64; n * n];
    for row in table {
        let i = parcellation
            .index_of(&row.region_a)
            .ok_or_else(|| ConnectomeError::UnknownRegion(row.region_a.clone()))?;
        let j = parcellation
            .index_of(&row.region_b)
            .ok_or_else(|| ConnectomeError::UnknownRegion(row.region_b.clone()))?;
        if i == j {
            continue;
        }
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        counts[lo * n + hi] += row.count;
    }
    let mut weights = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let c = counts[i * n + j] as f64;
            weights[(i, j)] = c;
            weights[(j, i)] = c;
        }
    }
    Connectome::new(parcellation, weights, ConnectomeKind::StreamlineCount)
}

/// Entry is 1 iff its weight is strictly above `threshold`.
pub fn binarize(c: &Connectome, threshold: f64) -> Connectome {
    let weights = c.weights.map(|w| if w > threshold { 1.0 } else { 0.0 });
    Connectome {
        parcellation: c.parcellation.clone(),
        weights,
        kind: ConnectomeKind::Binary,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parc(entries: &[(&str, Hemisphere)]) -> Parcellation {
        Parcellation::new(
            "test",
            entries.iter().map(|(n, h)| (n.to_string(), *h)),
        )
        .unwrap()
    }

    #[test]
    fn pair_is_canonical() {
        let p = parc(&[("Thalamus", Hemisphere::Left), ("Precentral", Hemisphere::Left)]);
        let pair = p.pair("Thalamus", "Precentral").unwrap();
        assert_eq!(pair.key(), ("Precentral", "Thalamus"));
        assert!(p.pair("Thalamus", "Thalamus").is_err());
    }

    #[test]
    fn enumerate_all_pairs() {
        use Hemisphere::*;
        let p = parc(&[("A", Left), ("B", Left), ("C", Right), ("D", Right)]);
        assert_eq!(enumerate_pairs(&p, PairScope::All).len(), 6);
        let within = enumerate_pairs(&p, PairScope::WithinHemisphere);
        let keys: Vec<_> = within.iter().map(|p| p.key()).collect();
        assert_eq!(keys, vec![("A", "B"), ("C", "D")]);
    }

    #[test]
    fn midline_pairs_with_both_sides() {
        use Hemisphere::*;
        let p = parc(&[("Brainstem", Midline), ("Precentral", Left), ("Cuneus", Right)]);
        let within = enumerate_pairs(&p, PairScope::WithinHemisphere);
        let keys: Vec<_> = within.iter().map(|p| p.key()).collect();
        assert_eq!(keys, vec![("Brainstem", "Cuneus"), ("Brainstem", "Precentral")]);
    }

    #[test]
    fn endpoints_accumulate_symmetrically() {
        use Hemisphere::*;
        let p = Arc::new(parc(&[("A", Left), ("B", Left), ("C", Left)]));
        let rows = vec![
            EndpointRow { region_a: "A".into(), region_b: "B".into(), count: 2 },
            EndpointRow { region_a: "B".into(), region_b: "A".into(), count: 1 },
        ];
        let c = connectome_from_endpoints(&rows, p.clone()).unwrap();
        assert_eq!(c.weight(0, 1), 3.0);
        assert_eq!(c.weight(1, 0), 3.0);
        assert_eq!(c.weight(0, 2), 0.0);

        let empty = connectome_from_endpoints(&[], p.clone()).unwrap();
        assert!(empty.weights().iter().all(|&w| w == 0.0));

        let bad = vec![EndpointRow { region_a: "A".into(), region_b: "Z".into(), count: 1 }];
        assert!(matches!(
            connectome_from_endpoints(&bad, p),
            Err(ConnectomeError::UnknownRegion(name)) if name == "Z"
        ));
    }

    #[test]
    fn binarize_threshold_is_strict() {
        use Hemisphere::*;
        let p = Arc::new(parc(&[("A", Left), ("B", Left), ("C", Left)]));
        let c = Connectome::from_edges(
            p,
            ConnectomeKind::Commit2WeightSum,
            [(0, 1, 0.0), (0, 2, 1e-9), (1, 2, 0.4)],
        )
        .unwrap();
        let b = binarize(&c, 0.0);
        assert_eq!(b.kind(), ConnectomeKind::Binary);
        assert_eq!(b.weight(0, 1), 0.0);
        assert_eq!(b.weight(0, 2), 1.0);
        assert_eq!(b.weight(2, 0), 1.0);
        assert_eq!(b.weight(1, 2), 1.0);
    }

    #[test]
    fn rejects_invalid_matrices() {
        use Hemisphere::*;
        let p = Arc::new(parc(&[("A", Left), ("B", Left)]));
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert!(matches!(
            Connectome::new(p.clone(), asym, ConnectomeKind::StreamlineCount),
            Err(ConnectomeError::NotSymmetric(0, 1))
        ));
        let diag = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(Connectome::new(p.clone(), diag, ConnectomeKind::StreamlineCount).is_err());
        let nonbin = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]);
        assert!(matches!(
            Connectome::new(p, nonbin, ConnectomeKind::Binary),
            Err(ConnectomeError::NotBinary(..))
        ));
    }

    fn random_parcellation(n: usize) -> Arc<Parcellation> {
        Arc::new(
            Parcellation::new(
                "rand",
                (0..n).map(|i| (format!("R{i:02}"), Hemisphere::Left)),
            )
            .unwrap(),
        )
    }

    proptest! {
        #[test]
        fn endpoints_order_independent(
            rows in prop::collection::vec((0usize..6, 0usize..6, 0u64..50), 0..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let p = random_parcellation(6);
            let table: Vec<EndpointRow> = rows
                .iter()
                .map(|&(a, b, c)| EndpointRow {
                    region_a: format!("R{a:02}"),
                    region_b: format!("R{b:02}"),
                    count: c,
                })
                .collect();
            let mut shuffled = table.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let x = connectome_from_endpoints(&table, p.clone()).unwrap();
            let y = connectome_from_endpoints(&shuffled, p).unwrap();
            prop_assert_eq!(x.weights(), y.weights());
        }

        #[test]
        fn binarize_preserves_structure_and_is_idempotent(
            upper in prop::collection::vec(0.0f64..5.0, 28),
            threshold in 0.0f64..5.0,
        ) {
            let p = random_parcellation(8);
            let mut k = 0;
            let mut edges = Vec::new();
            for i in 0..8 {
                for j in i + 1..8 {
                    edges.push((i, j, upper[k]));
                    k += 1;
                }
            }
            let c = Connectome::from_edges(p, ConnectomeKind::Commit2WeightSum, edges).unwrap();
            let b = binarize(&c, threshold);
            // re-validating checks symmetry, zero diagonal and binary entries
            let checked = Connectome::new(b.parcellation().clone(), b.weights().clone(), ConnectomeKind::Binary);
            prop_assert!(checked.is_ok());
            prop_assert_eq!(binarize(&b, 0.0), b);
        }
    }
}
