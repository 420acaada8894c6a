//! Correlation structure of byte pairs and bipartite spectral co-clustering.
//!
//! Every byte pair appears on both sides of a bipartite graph whose edge
//! weights are absolute Pearson correlations. Clusters come from k-means on
//! the degree-scaled leading singular vectors of the normalized affinity.
//! Synthetic canonical series (ground-truth measurements of a vehicle state)
//! ride along as pseudo-ids and name the cluster they land in.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::codec::BytePairId;
use crate::error::ClusterError;
use crate::kmeans::{kmeans, KMeansParams};
use crate::rng;

/// Default cluster count: one per recorded vehicle state.
pub const DEFAULT_CLUSTERS: usize = 5;

/// Row/column key of the correlation matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SignalId {
    BytePair(BytePairId),
    /// Canonical pseudo-id carrying a state label.
    Canonical(String),
}

impl SignalId {
    pub fn byte_pair(&self) -> Option<BytePairId> {
        match self {
            SignalId::BytePair(id) => Some(*id),
            SignalId::Canonical(_) => None,
        }
    }
}

impl fmt::Display for SignalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalId::BytePair(id) => id.fmt(f),
            SignalId::Canonical(s) => write!(f, "canonical:{s}"),
        }
    }
}

impl FromStr for SignalId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.strip_prefix("canonical:") {
            Some(label) => Ok(SignalId::Canonical(label.to_string())),
            None => s
                .parse()
                .map(SignalId::BytePair)
                .map_err(|e| format!("bad signal id {s:?}: {e}")),
        }
    }
}

impl Serialize for SignalId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SignalId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub ids: Vec<SignalId>,
    pub values: DMatrix<f64>,
}

impl CorrelationMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows and columns rearranged by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = order.len();
        Self {
            ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
            values: DMatrix::from_fn(n, n, |r, c| self.values[(order[r], order[c])]),
        }
    }

    /// Plot-ready CSV: header row of ids, then one labelled row per id.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for id in &self.ids {
            out.push(',');
            out.push_str(&id.to_string());
        }
        out.push('\n');
        for (r, id) in self.ids.iter().enumerate() {
            out.push_str(&id.to_string());
            for c in 0..self.ids.len() {
                out.push_str(&format!(",{}", self.values[(r, c)]));
            }
            out.push('\n');
        }
        out
    }
}

fn standardize(id: &SignalId, v: &[f64]) -> Result<Vec<f64>, ClusterError> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let centered: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = centered.iter().map(|x| x * x).sum::<f64>().sqrt();
    // relative test: a constant series can leave rounding residue after centering
    let scale = v.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
    if norm <= 1e-12 * scale * n.sqrt() {
        return Err(ClusterError::ConstantSeries(id.to_string()));
    }
    Ok(centered.into_iter().map(|x| x / norm).collect())
}

/// Pearson correlation over resampled series. Byte pairs come first in id
/// order, followed by canonical pseudo-ids in label order.
pub fn correlation_matrix(
    series: &BTreeMap<BytePairId, Vec<f64>>,
    canonical: &BTreeMap<String, Vec<f64>>,
) -> Result<CorrelationMatrix, ClusterError> {
    let entries: Vec<(SignalId, &Vec<f64>)> = series
        .iter()
        .map(|(id, v)| (SignalId::BytePair(*id), v))
        .chain(canonical.iter().map(|(s, v)| (SignalId::Canonical(s.clone()), v)))
        .collect();
    let Some(len) = entries.first().map(|e| e.1.len()) else {
        return Ok(CorrelationMatrix {
            ids: Vec::new(),
            values: DMatrix::zeros(0, 0),
        });
    };
    if len < 2 {
        return Err(ClusterError::InvalidParameter(format!(
            "series need at least 2 points, got {len}"
        )));
    }
    let mut z = Vec::with_capacity(entries.len());
    for (id, v) in &entries {
        if v.len() != len {
            return Err(ClusterError::LengthMismatch {
                expected: len,
                got: v.len(),
            });
        }
        z.push(standardize(id, v)?);
    }
    let n = z.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let r: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum();
            let r = r.clamp(-1.0, 1.0);
            m[(i, j)] = r;
            m[(j, i)] = r;
        }
    }
    Ok(CorrelationMatrix {
        ids: entries.into_iter().map(|e| e.0).collect(),
        values: m,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoClusterModel {
    /// Number of non-empty clusters.
    pub k: usize,
    pub ids: Vec<SignalId>,
    /// Cluster index per id, parallel to `ids`.
    pub assignment: Vec<usize>,
    /// State label -> cluster holding that state's canonical pseudo-id.
    pub labels: BTreeMap<String, usize>,
    /// Ids whose row-node and column-node clusters differed.
    pub disagreement_count: usize,
    pub converged: bool,
}

impl CoClusterModel {
    pub fn cluster_of(&self, id: &SignalId) -> Option<usize> {
        self.ids.iter().position(|x| x == id).map(|i| self.assignment[i])
    }

    /// Byte pairs (canonical pseudo-ids excluded) of one cluster, in id order.
    pub fn members(&self, cluster: usize) -> Vec<BytePairId> {
        let mut out: Vec<BytePairId> = self
            .ids
            .iter()
            .zip(&self.assignment)
            .filter(|(_, &c)| c == cluster)
            .filter_map(|(id, _)| id.byte_pair())
            .collect();
        out.sort();
        out
    }

    /// Byte pairs of the cluster labelled `state`.
    pub fn members_of(&self, state: &str) -> Option<Vec<BytePairId>> {
        self.labels.get(state).map(|&c| self.members(c))
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Bipartite spectral co-clustering of `|M|` into `k` groups.
pub fn spectral_cocluster(m: &CorrelationMatrix, k: usize, seed: u64) -> Result<CoClusterModel, ClusterError> {
    let n = m.len();
    if k < 2 {
        return Err(ClusterError::InvalidParameter(format!("k must be at least 2, got {k}")));
    }
    if n < k {
        return Err(ClusterError::InvalidParameter(format!(
            "{n} signals cannot form {k} clusters"
        )));
    }
    let a = m.values.map(f64::abs);
    let row_sums: Vec<f64> = a.row_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<f64> = a.column_iter().map(|c| c.sum()).collect();
    for (i, (&r, &c)) in row_sums.iter().zip(&col_sums).enumerate() {
        if !(r > 0.0 && c > 0.0) {
            return Err(ClusterError::DegenerateRow(m.ids[i].to_string()));
        }
    }
    let r_isqrt: Vec<f64> = row_sums.iter().map(|s| s.sqrt().recip()).collect();
    let c_isqrt: Vec<f64> = col_sums.iter().map(|s| s.sqrt().recip()).collect();
    let an = DMatrix::from_fn(n, n, |i, j| r_isqrt[i] * a[(i, j)] * c_isqrt[j]);

    let svd = SVD::new(an, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));

    // The leading pair is kept: it is constant after degree scaling on a
    // connected graph, and carries the component split on a disconnected one.
    let ell = (k as f64).log2().ceil() as usize;
    let cols = &order[..(ell + 1).min(n)];
    let mut z = Vec::with_capacity(2 * n);
    for i in 0..n {
        z.push(cols.iter().map(|&c| r_isqrt[i] * u[(i, c)]).collect::<Vec<_>>());
    }
    for i in 0..n {
        z.push(cols.iter().map(|&c| c_isqrt[i] * vt[(c, i)]).collect::<Vec<_>>());
    }

    let mut rng = rng::stream(seed, rng::KMEANS);
    let res = kmeans(
        &z,
        KMeansParams {
            k,
            ..KMeansParams::default()
        },
        &mut rng,
    );
    if !res.converged {
        log::warn!("k-means hit its iteration cap; using the best partition found");
    }
    let (rows, columns) = res.labels.split_at(n);
    let disagreement_count = rows.iter().zip(columns).filter(|(a, b)| a != b).count();

    // relabel by first appearance so cluster indices follow id order
    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    let assignment: Vec<usize> = rows
        .iter()
        .map(|&c| {
            let next = relabel.len();
            *relabel.entry(c).or_insert(next)
        })
        .collect();
    let labels = m
        .ids
        .iter()
        .zip(&assignment)
        .filter_map(|(id, &c)| match id {
            SignalId::Canonical(s) => Some((s.clone(), c)),
            SignalId::BytePair(_) => None,
        })
        .collect();
    Ok(CoClusterModel {
        k: relabel.len(),
        ids: m.ids.clone(),
        assignment,
        labels,
        disagreement_count,
        converged: res.converged,
    })
}

/// Permutation of matrix rows grouping ids by cluster: clusters in index
/// order, members in matrix order.
pub fn cluster_heatmap_order(model: &CoClusterModel, m: &CorrelationMatrix) -> Result<Vec<usize>, ClusterError> {
    if model.ids != m.ids {
        return Err(ClusterError::InvalidParameter(
            "cluster model and correlation matrix cover different ids".into(),
        ));
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by_key(|&i| (model.assignment[i], i));
    Ok(order)
}

/// Fraction of items whose cluster's majority truth label matches their own.
pub fn purity(assignment: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(assignment.len(), truth.len());
    if assignment.is_empty() {
        return 1.0;
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&a, &t) in assignment.iter().zip(truth) {
        *counts.entry(a).or_default().entry(t).or_default() += 1;
    }
    let hits: usize = counts.values().map(|c| c.values().max().copied().unwrap_or(0)).sum();
    hits as f64 / assignment.len() as f64
}

/// Planted block-correlation fixtures for validating the co-clustering.
pub mod planted {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[derive(Debug, Clone, Copy)]
    pub struct PlantedSpec {
        pub blocks: usize,
        pub block_size: usize,
        /// Target correlation within a block.
        pub intra: f64,
        /// Target correlation across blocks.
        pub inter: f64,
        /// Standard deviation of symmetric noise added to the correlations.
        pub noise: f64,
        /// Series length used to realize the correlations.
        pub len: usize,
    }

    impl Default for PlantedSpec {
        fn default() -> Self {
            Self {
                blocks: 3,
                block_size: 20,
                intra: 0.9,
                inter: 0.05,
                noise: 0.02,
                len: 2000,
            }
        }
    }

    pub struct Planted {
        pub matrix: CorrelationMatrix,
        /// Planted block per matrix row (canonical rows carry their block).
        pub truth: Vec<usize>,
    }

    /// Series `sqrt(inter) g + sqrt(intra - inter) z_b + sqrt(1 - intra) e`
    /// realize the target correlations; a canonical series tracking block
    /// `canonical_block`'s factor is labelled `canonical_label`.
    pub fn generate(spec: PlantedSpec, canonical_label: &str, canonical_block: usize, seed: u64) -> Planted {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| normal.sample(&mut rng)).collect() };
        let global = draw(spec.len);
        let factors: Vec<Vec<f64>> = (0..spec.blocks).map(|_| draw(spec.len)).collect();
        let (wg, wb, we) = (
            spec.inter.sqrt(),
            (spec.intra - spec.inter).sqrt(),
            (1.0 - spec.intra).sqrt(),
        );
        let mut series = BTreeMap::new();
        let mut truth = Vec::new();
        for (b, factor) in factors.iter().enumerate() {
            for i in 0..spec.block_size {
                let e = draw(spec.len);
                let v = (0..spec.len)
                    .map(|t| wg * global[t] + wb * factor[t] + we * e[t])
                    .collect();
                let g = b * spec.block_size + i;
                series.insert(BytePairId::new((g / 4) as u32, (g % 4) as u8), v);
            }
        }
        // BytePairId ordering equals generation order, so truth is block-major
        for b in 0..spec.blocks {
            truth.extend(std::iter::repeat_n(b, spec.block_size));
        }
        let e = draw(spec.len);
        let canon: Vec<f64> = (0..spec.len)
            .map(|t| factors[canonical_block][t] + 0.3 * e[t])
            .collect();
        let canonical = BTreeMap::from([(canonical_label.to_string(), canon)]);
        truth.push(canonical_block);

        let mut matrix = correlation_matrix(&series, &canonical).expect("planted series are valid");
        let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).unwrap();
        let n = matrix.len();
        for i in 0..n {
            for j in i + 1..n {
                let r = (matrix.values[(i, j)] + noise.sample(&mut rng)).clamp(-1.0, 1.0);
                matrix.values[(i, j)] = r;
                matrix.values[(j, i)] = r;
            }
        }
        Planted { matrix, truth }
    }
}
