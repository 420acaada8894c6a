//! Diffusion-map embedding with a Nyström landmark approximation.
//!
//! Given `n` scaled observations and `k` landmarks sampled from them, the
//! Gaussian kernel matrix is approximated as `K̂ = A·B·Aᵀ`, where `A` holds
//! kernel values between observations and landmarks and `B` is the
//! pseudo-inverse of the landmark kernel matrix `W`. The Markov matrix
//! `P̂ = D⁻¹·K̂` is never formed: writing `B = G·Gᵀ` gives `K̂ = F·Fᵀ` with
//! `F = A·G`, and the eigenpairs of `P̂` follow from those of the small
//! matrix `Hᵀ·H` where `H = D^(-1/2)·F`.
//!
//! The leading eigenpair of `P̂` is known in closed form (eigenvalue 1,
//! constant eigenvector) and is deflated before the solve. A point embeds as
//! `Ψ(x)_j = ⟨p̂(x), ξ_(j+1)⟩` where `p̂(x)` is its Nyström transition row;
//! the products `B·Aᵀ·ξ` are cached so embedding costs `O(k·d + k·m)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::codec::BytePairId;
use crate::error::DiffusionError;
use crate::pipeline::{Observation, Scaler};
use crate::rng;

pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_LANDMARKS: usize = 1000;
pub const DEFAULT_DIM: usize = 3;
/// Relative cut-off for the landmark pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-10;
/// Eigenvalues at or below this count as numerically zero.
const EIGEN_FLOOR: f64 = 1e-10;
/// Transition-row mass at or below this is treated as no kernel support.
const ZERO_ROW_MASS: f64 = 1e-300;

pub fn kernel(a: &[f64], b: &[f64], gamma: f64) -> Result<f64, DiffusionError> {
    if a.len() != b.len() {
        return Err(DiffusionError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if !(gamma > 0.0) {
        return Err(DiffusionError::InvalidParameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(kernel_unchecked(a, b, gamma))
}

#[inline]
fn kernel_unchecked(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaChoice {
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for GammaChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|g| g.is_finite() && *g > 0.0)
            .map(Self::Fixed)
            .ok_or_else(|| format!("gamma must be \"auto\" or a positive number, got {s:?}"))
    }
}

impl std::fmt::Display for GammaChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(g) => write!(f, "{g}"),
        }
    }
}

/// Outcome of the kernel-bandwidth heuristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSelection {
    pub gamma: f64,
    /// `(ln γ, ln Σ K)` over the grid.
    pub curve: Vec<(f64, f64)>,
    /// Grid index range `[start, end]` of the linear region, if one was found.
    pub region: Option<(usize, usize)>,
    /// True when no linear region exists and the median-distance rule was used.
    pub fallback: bool,
}

/// `count` log-spaced values from `10^lo` to `10^hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (count - 1).max(1) as f64))
        .collect()
}

/// Default search grid: eight points per decade over 1e-3..1e5.
pub fn default_gamma_grid() -> Vec<f64> {
    log_grid(-3.0, 5.0, 65)
}

/// `ln Σ_ij K(x_i, x_j; γ)` for each γ.
pub fn kernel_sum_curve(sample: &[Vec<f64>], grid: &[f64]) -> Vec<(f64, f64)> {
    let n = sample.len();
    let mut d2 = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d2.push(
                sample[i]
                    .iter()
                    .zip(&sample[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>(),
            );
        }
    }
    grid.iter()
        .map(|&g| {
            let off: f64 = d2.iter().map(|d| (-g * d).exp()).sum();
            (g.ln(), (n as f64 + 2.0 * off).ln())
        })
        .collect()
}

/// Longest run of discrete slopes that agree with the run's median slope to
/// within 20% and exceed 0.1 in magnitude. Returns grid indices
/// `[start, end]` of the run's endpoints.
pub fn linear_region(curve: &[(f64, f64)]) -> Result<(usize, usize), DiffusionError> {
    const MIN_SLOPES: usize = 3;
    let slopes: Vec<f64> = curve
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
        .collect();
    let linear = |seg: &[f64]| {
        let mut sorted = seg.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        seg.iter()
            .all(|s| s.abs() > 0.1 && (s - median).abs() <= 0.2 * median.abs())
    };
    let mut best: Option<(usize, usize)> = None;
    for a in 0..slopes.len() {
        for b in (a + MIN_SLOPES - 1..slopes.len()).rev() {
            if best.is_some_and(|(s, e)| b - a <= e - s) {
                break;
            }
            if linear(&slopes[a..=b]) {
                best = Some((a, b));
                break;
            }
        }
    }
    // slope i spans grid points i and i + 1
    best.map(|(a, b)| (a, b + 1)).ok_or(DiffusionError::NoLinearRegion)
}

/// Choose γ at the right end of the linear region of the kernel-sum curve,
/// falling back to `1 / median ‖x_i − x_j‖²` when there is none.
pub fn select_gamma(sample: &[Vec<f64>], grid: &[f64]) -> Result<GammaSelection, DiffusionError> {
    if grid.len() < 2 || grid.iter().any(|g| !(*g > 0.0)) {
        return Err(DiffusionError::InvalidParameter(
            "gamma grid must hold positive values".into(),
        ));
    }
    let distinct = sample.iter().any(|x| x != &sample[0]);
    if sample.len() < 2 || !distinct {
        return Err(DiffusionError::InvalidParameter(
            "gamma selection needs at least two distinct points".into(),
        ));
    }
    let curve = kernel_sum_curve(sample, grid);
    match linear_region(&curve) {
        Ok((start, end)) => Ok(GammaSelection {
            gamma: grid[end],
            curve,
            region: Some((start, end)),
            fallback: false,
        }),
        Err(DiffusionError::NoLinearRegion) => {
            log::warn!("no linear region in the kernel-sum curve; using the median-distance rule");
            let mut d2: Vec<f64> = Vec::new();
            for i in 0..sample.len() {
                for j in i + 1..sample.len() {
                    let d: f64 = sample[i].iter().zip(&sample[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d > 0.0 {
                        d2.push(d);
                    }
                }
            }
            d2.sort_by(f64::total_cmp);
            Ok(GammaSelection {
                gamma: 1.0 / d2[d2.len() / 2],
                curve,
                region: None,
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitParams {
    pub landmarks: usize,
    pub dim: usize,
    pub gamma: GammaChoice,
    pub seed: u64,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            landmarks: DEFAULT_LANDMARKS,
            dim: DEFAULT_DIM,
            gamma: GammaChoice::Auto,
            seed: 0,
        }
    }
}

/// Cached products `B·Aᵀ·1` and `B·Aᵀ·ξ_j` over the landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCache {
    /// Length k.
    pub mass: Vec<f64>,
    /// k rows of m coordinates.
    pub coords: Vec<Vec<f64>>,
}

/// Everything needed to embed new observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub version: u32,
    pub gamma: f64,
    pub m: usize,
    pub k: usize,
    pub member_ids: Vec<BytePairId>,
    pub scaler: Scaler,
    /// AIDs present in the training traffic.
    #[serde(default)]
    pub training_aids: Vec<u32>,
    pub landmarks: Vec<Vec<f64>>,
    pub pinv: Vec<Vec<f64>>,
    /// λ_1 = 1 ≥ λ_2 ≥ … ≥ λ_(m+1).
    pub eigvals: Vec<f64>,
    /// Right eigenvectors of P̂ over the training set, one per eigenvalue.
    pub eigvecs: Vec<Vec<f64>>,
    /// Ψ(S): n rows of m coordinates.
    pub train_embed: Vec<Vec<f64>>,
    pub projection_cache: ProjectionCache,
}

/// One embedded observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub time: f64,
    pub psi: Vec<f64>,
}

/// The factored Markov operator of a fit, kept for verification. Holds the
/// `n × k` matrix `A`, so it is not part of the persisted model.
#[derive(Debug, Clone)]
pub struct MarkovFactors {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Row sums of K̂.
    pub row_sums: DVector<f64>,
}

impl MarkovFactors {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// `P̂·v` in `O(nk)`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let kv = &self.a * (&self.b * (self.a.transpose() * v));
        kv.component_div(&self.row_sums)
    }

    /// Materialized K̂. Quadratic in n; for tests and diagnostics.
    pub fn kernel_approx(&self) -> DMatrix<f64> {
        &self.a * &self.b * self.a.transpose()
    }

    /// Materialized row `i` of P̂.
    pub fn transition_row(&self, i: usize) -> DVector<f64> {
        let ki = (self.a.row(i) * &self.b * self.a.transpose()).transpose();
        ki / self.row_sums[i]
    }

    /// Materialized `p̂(x)` for an out-of-sample point.
    pub fn transition_row_for(&self, model: &DiffusionModel, x: &[f64]) -> DVector<f64> {
        let ax = DVector::from_iterator(
            model.k,
            model.landmarks.iter().map(|l| kernel_unchecked(x, l, model.gamma)),
        );
        let kx = (ax.transpose() * &self.b * self.a.transpose()).transpose();
        let s = kx.sum();
        kx / s
    }
}

/// A fitted model together with its fit-time diagnostics.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: DiffusionModel,
    pub factors: MarkovFactors,
    pub gamma_selection: Option<GammaSelection>,
    /// Indices of the observations used as landmarks.
    pub landmark_indices: Vec<usize>,
}

/// Points used for γ selection are capped to keep the quadratic curve cheap.
const GAMMA_SAMPLE: usize = 400;

pub fn fit(observations: &[Vec<f64>], params: FitParams) -> Result<DiffusionModel, DiffusionError> {
    fit_full(observations, params).map(|f| f.model)
}

pub fn fit_full(observations: &[Vec<f64>], params: FitParams) -> Result<Fit, DiffusionError> {
    let n = observations.len();
    let FitParams {
        landmarks: k, dim: m, ..
    } = params;
    if m < 1 || k < m + 2 || n < k {
        return Err(DiffusionError::InvalidParameter(format!(
            "need n >= k >= m + 2 and m >= 1, got n = {n}, k = {k}, m = {m}"
        )));
    }
    let d = observations[0].len();
    if let Some(bad) = observations.iter().find(|x| x.len() != d) {
        return Err(DiffusionError::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    if observations.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DiffusionError::InvalidParameter("observations must be finite".into()));
    }
    if observations.iter().all(|x| x == &observations[0]) {
        return Err(DiffusionError::RankCollapse {
            found: 1,
            needed: m + 1,
        });
    }

    let mut rng = rng::stream(params.seed, rng::LANDMARKS);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    let landmarks: Vec<Vec<f64>> = idx.iter().map(|&i| observations[i].clone()).collect();

    let (gamma, gamma_selection) = match params.gamma {
        GammaChoice::Fixed(g) if g > 0.0 && g.is_finite() => (g, None),
        GammaChoice::Fixed(g) => {
            return Err(DiffusionError::InvalidParameter(format!(
                "gamma must be positive, got {g}"
            )))
        }
        GammaChoice::Auto => {
            let sample: Vec<Vec<f64>> = landmarks.iter().take(GAMMA_SAMPLE).cloned().collect();
            let sel = select_gamma(&sample, &default_gamma_grid())?;
            (sel.gamma, Some(sel))
        }
    };

    let a = DMatrix::from_fn(n, k, |i, j| kernel_unchecked(&observations[i], &landmarks[j], gamma));
    let w = DMatrix::from_fn(k, k, |i, j| a[(idx[i], j)]);

    // W = Q Λ Qᵀ; keep the numerically positive part.
    let eig = SymmetricEigen::new(w);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let keep: Vec<usize> = (0..k).filter(|&i| eig.eigenvalues[i] > PINV_RTOL * lmax).collect();
    let dropped_negative = (0..k).filter(|&i| eig.eigenvalues[i] < -PINV_RTOL * lmax).count();
    if dropped_negative > 0 {
        log::warn!("landmark kernel has {dropped_negative} significantly negative eigenvalues; dropped");
    }
    let r = keep.len();
    let g = DMatrix::from_fn(k, r, |i, j| {
        eig.eigenvectors[(i, keep[j])] / eig.eigenvalues[keep[j]].sqrt()
    });
    let b = &g * g.transpose();

    let f = &a * &g;
    let f_colsum: DVector<f64> = f.row_sum().transpose();
    let row_sums: DVector<f64> = &f * &f_colsum;
    if let Some(i) = row_sums.iter().position(|s| !(*s > ZERO_ROW_MASS)) {
        return Err(DiffusionError::InvalidParameter(format!(
            "observation {i} has non-positive approximate kernel mass; gamma is too large for the landmark set"
        )));
    }
    let total: f64 = row_sums.sum();
    let d_sqrt = row_sums.map(f64::sqrt);
    let d_isqrt = row_sums.map(|s| s.sqrt().recip());

    // H = D^(-1/2) F, deflated against the known leading direction u₁ ∝ D^(1/2)·1.
    let mut h = f.clone();
    for (mut row, s) in h.row_iter_mut().zip(d_isqrt.iter()) {
        row *= *s;
    }
    let u1 = &d_sqrt / total.sqrt();
    let proj = u1.transpose() * &h;
    h -= &u1 * proj;

    let small = SymmetricEigen::new(h.transpose() * &h);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&x, &y| small.eigenvalues[y].total_cmp(&small.eigenvalues[x]).then(x.cmp(&y)));
    let nonzero = order.iter().filter(|&&i| small.eigenvalues[i] > EIGEN_FLOOR).count();
    if nonzero < m {
        return Err(DiffusionError::RankCollapse {
            found: nonzero + 1,
            needed: m + 1,
        });
    }

    let mut eigvals = vec![1.0];
    let mut xi = DMatrix::zeros(n, m + 1);
    xi.column_mut(0).fill(1.0 / total.sqrt());
    for (c, &i) in order.iter().take(m).enumerate() {
        let lambda = small.eigenvalues[i];
        let v = small.eigenvectors.column(i);
        let mut u = &h * v / lambda.sqrt();
        // sign convention: largest-magnitude entry positive
        let imax = u.iamax();
        if u[imax] < 0.0 {
            u = -u;
        }
        xi.column_mut(c + 1).copy_from(&u.component_mul(&d_isqrt));
        eigvals.push(lambda);
    }
    if eigvals[1] > 1.0 + 1e-9 {
        log::warn!(
            "second eigenvalue {} exceeds 1; the landmark approximation has significant negative mass",
            eigvals[1]
        );
    }

    // B·Aᵀ·v = G·(Fᵀ·v)
    let mass = &g * &f_colsum;
    let coords = &g * (f.transpose() * xi.columns(1, m));
    let num = &a * &coords;
    let den = &a * &mass;
    let train = DMatrix::from_fn(n, m, |i, j| num[(i, j)] / den[i]);

    let model = DiffusionModel {
        version: MODEL_VERSION,
        gamma,
        m,
        k,
        member_ids: Vec::new(),
        scaler: Scaler::Identity,
        training_aids: Vec::new(),
        landmarks,
        pinv: rows_of(&b),
        eigvals,
        eigvecs: (0..=m).map(|c| xi.column(c).iter().copied().collect()).collect(),
        train_embed: rows_of(&train),
        projection_cache: ProjectionCache {
            mass: mass.iter().copied().collect(),
            coords: rows_of(&coords),
        },
    };
    Ok(Fit {
        model,
        factors: MarkovFactors { a, b, row_sums },
        gamma_selection,
        landmark_indices: idx,
    })
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl DiffusionModel {
    /// Attach the signal definition the observations were built from.
    pub fn with_signals(mut self, member_ids: Vec<BytePairId>, scaler: Scaler, training_aids: Vec<u32>) -> Self {
        self.member_ids = member_ids;
        self.scaler = scaler;
        self.training_aids = training_aids;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.landmarks.first().map_or(0, Vec::len)
    }

    pub fn n_train(&self) -> usize {
        self.train_embed.len()
    }

    /// Out-of-sample embedding through the cached landmark projections.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        let d = self.input_dim();
        if x.len() != d {
            return Err(DiffusionError::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        let cache = &self.projection_cache;
        let mut mass = 0.0;
        let mut psi = vec![0.0; self.m];
        for ((l, &w_mass), coords) in self.landmarks.iter().zip(&cache.mass).zip(&cache.coords) {
            let a = kernel_unchecked(x, l, self.gamma);
            if a == 0.0 {
                continue;
            }
            mass += a * w_mass;
            for (p, c) in psi.iter_mut().zip(coords) {
                *p += a * c;
            }
        }
        if !(mass > ZERO_ROW_MASS) {
            return Err(DiffusionError::ZeroKernelRow);
        }
        psi.iter_mut().for_each(|p| *p /= mass);
        Ok(psi)
    }

    pub fn embed_observation(&self, obs: &Observation) -> Result<EmbeddedPoint, DiffusionError> {
        Ok(EmbeddedPoint {
            time: obs.time,
            psi: self.embed(&obs.x)?,
        })
    }

    /// Structural consistency of a loaded model.
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |msg: String| Err(DiffusionError::InvalidParameter(msg));
        if self.version != MODEL_VERSION {
            return bad(format!("unsupported model version {}", self.version));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        let (k, m, d) = (self.k, self.m, self.input_dim());
        let n = self.n_train();
        let ok = self.landmarks.len() == k
            && self.landmarks.iter().all(|l| l.len() == d)
            && self.pinv.len() == k
            && self.pinv.iter().all(|r| r.len() == k)
            && self.eigvals.len() == m + 1
            && self.eigvecs.len() == m + 1
            && self.eigvecs.iter().all(|v| v.len() == n)
            && self.train_embed.iter().all(|r| r.len() == m)
            && self.projection_cache.mass.len() == k
            && self.projection_cache.coords.len() == k
            && self.projection_cache.coords.iter().all(|r| r.len() == m)
            && (self.member_ids.is_empty() || self.member_ids.len() == d);
        if !ok {
            return bad("model arrays have inconsistent shapes".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Noisy helix in `d` dimensions.
    fn helix(n: usize, d: usize, noise: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let t = 4.0 * std::f64::consts::PI * i as f64 / n as f64;
                (0..d)
                    .map(|c| {
                        let base = match c % 3 {
                            0 => 0.5 + 0.4 * t.cos(),
                            1 => 0.5 + 0.4 * t.sin(),
                            _ => t / (4.0 * std::f64::consts::PI),
                        };
                        base + noise * (rng.random::<f64>() - 0.5)
                    })
                    .collect()
            })
            .collect()
    }

    fn uniform(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    }

    fn params(k: usize, m: usize, gamma: f64) -> FitParams {
        FitParams {
            landmarks: k,
            dim: m,
            gamma: GammaChoice::Fixed(gamma),
            seed: 1,
        }
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(kernel(&[0.3, 0.1], &[0.3, 0.1], 2.0).unwrap(), 1.0);
        assert!((kernel(&[0.0], &[1.0], std::f64::consts::LN_2).unwrap() - 0.5).abs() < 1e-15);
        // |a - b|^2 = 25 by hand
        assert!((kernel(&[0.0, 0.0], &[3.0, 4.0], 0.01).unwrap() - (-0.25f64).exp()).abs() < 1e-15);
        assert!(matches!(
            kernel(&[0.0], &[1.0, 2.0], 1.0),
            Err(DiffusionError::DimensionMismatch { .. })
        ));
        assert!(kernel(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn kernel_sum_limits_and_monotonicity() {
        let pts = uniform(40, 3, 2);
        let grid = log_grid(-8.0, 8.0, 33);
        let curve = kernel_sum_curve(&pts, &grid);
        let n = 40f64;
        assert!((curve[0].1 - (n * n).ln()).abs() < 1e-6);
        assert!((curve.last().unwrap().1 - n.ln()).abs() < 1e-6);
        assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12));
    }

    #[test]
    fn gamma_selection_finds_linear_region() {
        let pts = helix(300, 3, 0.02, 4);
        let sel = select_gamma(&pts, &default_gamma_grid()).unwrap();
        let (s, e) = sel.region.expect("helix has a linear region");
        assert!(!sel.fallback);
        assert!(e >= s + 3);
        assert_eq!(sel.gamma, default_gamma_grid()[e]);
    }

    #[test]
    fn gamma_selection_falls_back_without_linear_region() {
        // a grid too narrow to show any slope at all
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        let grid = log_grid(-9.0, -8.0, 5);
        let curve = kernel_sum_curve(&pts, &grid);
        assert_eq!(linear_region(&curve), Err(DiffusionError::NoLinearRegion));
        let sel = select_gamma(&pts, &grid).unwrap();
        assert!(sel.fallback);
        // squared distances 1, 4, 9: median 4
        assert_eq!(sel.gamma, 0.25);
        assert!(select_gamma(&[vec![1.0], vec![1.0]], &grid).is_err());
    }

    #[test]
    fn equilateral_triangle_oracle() {
        // side 1, gamma 0.7: every off-diagonal kernel entry is e^-0.7
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 3f64.sqrt() / 2.0]];
        let fit = fit_full(&pts, params(3, 1, 0.7)).unwrap();
        let kq = (-0.7f64).exp();
        let q = kq / (1.0 + 2.0 * kq);
        // P = (1-2q) I + q (J - I): eigenvalues 1 and 1 - 3q (twice)
        assert!((fit.model.eigvals[0] - 1.0).abs() < 1e-12);
        assert!((fit.model.eigvals[1] - (1.0 - 3.0 * q)).abs() < 1e-9);
        for i in 0..3 {
            let row = fit.factors.transition_row(i);
            for j in 0..3 {
                let expected = if i == j { 1.0 - 2.0 * q } else { q };
                assert!((row[j] - expected).abs() < 1e-9);
            }
        }
        let xi1 = &fit.model.eigvecs[0];
        assert!(xi1.iter().all(|v| (v - xi1[0]).abs() < 1e-12));
    }

    #[test]
    fn full_sampling_reproduces_kernel() {
        let pts = uniform(100, 5, 3);
        let fit = fit_full(&pts, params(100, 3, 5.0)).unwrap();
        let approx = fit.factors.kernel_approx();
        let mut worst = 0.0f64;
        for i in 0..100 {
            for j in 0..100 {
                worst = worst.max((approx[(i, j)] - kernel(&pts[i], &pts[j], 5.0).unwrap()).abs());
            }
        }
        assert!(worst <= 1e-6, "max deviation {worst}");
        for (x, row) in pts.iter().zip(&fit.model.train_embed) {
            let psi = fit.model.embed(x).unwrap();
            for (a, b) in psi.iter().zip(row) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn markov_properties() {
        let pts = helix(250, 4, 0.05, 5);
        let fit = fit_full(&pts, params(60, 3, 20.0)).unwrap();
        let model = &fit.model;
        let n = pts.len();
        for i in (0..n).step_by(7) {
            assert!((fit.factors.transition_row(i).sum() - 1.0).abs() < 1e-9);
        }
        let probe = vec![0.4; 4];
        assert!((fit.factors.transition_row_for(model, &probe).sum() - 1.0).abs() < 1e-9);
        // ones are a right eigenvector with eigenvalue 1
        let ones = DVector::from_element(n, 1.0);
        assert!((fit.factors.apply(&ones) - &ones).norm() < 1e-9 * ones.norm());
        for (lambda, v) in model.eigvals.iter().zip(&model.eigvecs) {
            let v = DVector::from_column_slice(v);
            let resid = (fit.factors.apply(&v) - &v * *lambda).norm();
            assert!(resid <= 1e-6 * v.norm(), "residual {resid} for {lambda}");
        }
        assert!((model.eigvals[0] - 1.0).abs() < 1e-12);
        assert!(model.eigvals.windows(2).all(|w| w[0] >= w[1] - 1e-9));
        assert!(*model.eigvals.last().unwrap() >= -1e-9);
        // orthonormal under the degree-weighted inner product
        for a in 0..model.eigvecs.len() {
            for b in 0..model.eigvecs.len() {
                let dot: f64 = (0..n)
                    .map(|i| model.eigvecs[a][i] * model.eigvecs[b][i] * fit.factors.row_sums[i])
                    .sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-6, "<{a},{b}>_D = {dot}");
            }
        }
        // training embedding is the projected transition row: λ_j ξ_j(i)
        for i in (0..n).step_by(13) {
            for j in 0..model.m {
                let expected = model.eigvals[j + 1] * model.eigvecs[j + 1][i];
                assert!((model.train_embed[i][j] - expected).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn landmarks_embed_onto_their_training_rows() {
        let pts = helix(200, 3, 0.05, 6);
        let fit = fit_full(&pts, params(50, 3, 30.0)).unwrap();
        for &i in &fit.landmark_indices {
            let psi = fit.model.embed(&pts[i]).unwrap();
            let dist: f64 = psi
                .iter()
                .zip(&fit.model.train_embed[i])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist <= 1e-6);
        }
    }

    #[test]
    fn far_points_have_no_kernel_row() {
        let pts = helix(200, 3, 0.05, 6);
        let model = fit(&pts, params(50, 3, 30.0)).unwrap();
        let far: Vec<f64> = pts[17].iter().map(|v| v + 10.0).collect();
        assert_eq!(model.embed(&far), Err(DiffusionError::ZeroKernelRow));
        assert!(matches!(
            model.embed(&[0.0]),
            Err(DiffusionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn embedding_is_locally_lipschitz() {
        let pts = helix(300, 3, 0.05, 8);
        let model = fit(&pts, params(80, 3, 30.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst = 0.0f64;
        for i in (0..300).step_by(5) {
            let delta: Vec<f64> = (0..3).map(|_| 1e-4 * (rng.random::<f64>() - 0.5)).collect();
            let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let y: Vec<f64> = pts[i].iter().zip(&delta).map(|(a, b)| a + b).collect();
            let (pa, pb) = (model.embed(&pts[i]).unwrap(), model.embed(&y).unwrap());
            let dp = pa.iter().zip(&pb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            worst = worst.max(dp / dn);
        }
        eprintln!("estimated local Lipschitz constant: {worst:.3}");
        assert!(worst.is_finite() && worst < 1e4);
    }

    #[test]
    fn fit_is_deterministic() {
        let pts = helix(150, 3, 0.05, 10);
        let a = fit(&pts, params(40, 2, 25.0)).unwrap();
        let b = fit(&pts, params(40, 2, 25.0)).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        let back: DiffusionModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        back.validate().unwrap();
    }

    #[test]
    fn rejects_bad_inputs() {
        let same = vec![vec![0.5, 0.5]; 20];
        assert!(matches!(
            fit(&same, params(10, 2, 1.0)),
            Err(DiffusionError::RankCollapse { .. })
        ));
        let pts = uniform(10, 2, 1);
        assert!(matches!(
            fit(&pts, params(11, 2, 1.0)),
            Err(DiffusionError::InvalidParameter(_))
        ));
        assert!(matches!(
            fit(&pts, params(3, 2, 1.0)),
            Err(DiffusionError::InvalidParameter(_))
        ));
        // three clusters of coincident points cannot support five eigenvectors
        let clumps: Vec<Vec<f64>> = (0..12).map(|i| vec![(i % 3) as f64, 0.0]).collect();
        assert!(matches!(
            fit(&clumps, params(12, 5, 1.0)),
            Err(DiffusionError::RankCollapse { .. })
        ));
    }

    #[test]
    fn auto_gamma_fit() {
        let pts = helix(300, 3, 0.02, 12);
        let fit = fit_full(
            &pts,
            FitParams {
                landmarks: 100,
                dim: 3,
                gamma: GammaChoice::Auto,
                seed: 2,
            },
        )
        .unwrap();
        let sel = fit.gamma_selection.unwrap();
        assert_eq!(fit.model.gamma, sel.gamma);
        assert!((fit.model.eigvals[0] - 1.0).abs() < 1e-12);
    }
}
