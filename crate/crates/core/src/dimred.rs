//! Supervised dimensionality reduction on the statistical manifold.
//!
//! A projection `W` (`D × d`, orthonormal) is learned by minimizing
//! `L(W) = Σ_{i<j} a(i,j) · δ(WᵀX_i, WᵀX_j)`, where `a` is +1 for
//! within-class neighbours and −1 for between-class neighbours. The
//! affinity and the projected-space bandwidths are computed once and kept
//! fixed while `W` moves.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSet;
use crate::density::{Bandwidth, BandwidthPolicy, DensityModel, KdeOptions};
use crate::divergence::{
    divergence_matrix, log_odds_limit, symmetric_estimate, DivergenceKind, PreparedSet, T_EPSILON,
};
use crate::error::{Error, Result};
use crate::io;
use crate::manifold::{cg_minimize, CgOptions, CgTrace, StiefelPoint};

/// Symmetric neighbourhood graph with entries in {−1, 0, +1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    #[serde(skip)]
    pub values: DMatrix<f64>,
    pub nu_w: usize,
    pub nu_b: usize,
}

impl AffinityMatrix {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Unordered pairs `(i, j, a)` with `i < j` and `a ≠ 0`, in row-major order.
    pub fn active_pairs(&self) -> Vec<(usize, usize, f64)> {
        let m = self.len();
        let mut out = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                let a = self.values[(i, j)];
                if a != 0.0 {
                    out.push((i, j, a));
                }
            }
        }
        out
    }
}

/// Indices of the `k` smallest entries of row `i` among `candidates`; ties by index.
fn nearest(div: &DMatrix<f64>, i: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| div[(i, a)].total_cmp(&div[(i, b)]).then(a.cmp(&b)));
    c.truncate(k);
    c
}

/// `ν_w` used when none is given: smallest class size minus one.
pub fn auto_nu_w(labels: &[usize]) -> usize {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.values().copied().min().unwrap_or(1).saturating_sub(1)
}

/// Builds `a = g_w − g_b` from a full-space divergence matrix.
///
/// `g_w(i,j) = 1` when `i` is among the `ν_w` nearest same-label sets of `j`
/// or vice versa; `g_b` is the same over different-label sets with `ν_b`.
/// A set is never its own neighbour and distance ties go to the lower index.
pub fn affinity_from_divergences(
    div: &DMatrix<f64>,
    labels: &[usize],
    nu_w: Option<usize>,
    nu_b: usize,
) -> Result<AffinityMatrix> {
    let m = div.nrows();
    if div.ncols() != m || labels.len() != m {
        return Err(Error::Shape(format!("divergence matrix {}×{} with {} labels", m, div.ncols(), labels.len())));
    }
    let nu_w = nu_w.unwrap_or_else(|| auto_nu_w(labels));
    if nu_b > nu_w {
        return Err(Error::InvalidArgument(format!("ν_b = {nu_b} exceeds ν_w = {nu_w}")));
    }
    let mut values = DMatrix::zeros(m, m);
    for j in 0..m {
        let same: Vec<usize> = (0..m).filter(|&i| i != j && labels[i] == labels[j]).collect();
        let other: Vec<usize> = (0..m).filter(|&i| labels[i] != labels[j]).collect();
        if same.len() < nu_w {
            return Err(Error::InvalidArgument(format!(
                "ν_w = {nu_w} but set {j} has only {} same-label neighbours",
                same.len()
            )));
        }
        for i in nearest(div, j, &same, nu_w) {
            values[(i, j)] = 1.0;
            values[(j, i)] = 1.0;
        }
        for i in nearest(div, j, &other, nu_b) {
            values[(i, j)] = -1.0;
            values[(j, i)] = -1.0;
        }
    }
    Ok(AffinityMatrix { values, nu_w, nu_b })
}

/// Affinity from the sets' full-dimensional divergences.
pub fn build_affinity(
    sets: &[FeatureSet],
    nu_w: Option<usize>,
    nu_b: usize,
    kind: DivergenceKind,
    kde: &KdeOptions,
) -> Result<AffinityMatrix> {
    let div = divergence_matrix(sets, kind, kde)?;
    let labels: Vec<usize> = sets.iter().map(|s| s.label).collect();
    affinity_from_divergences(&div.values, &labels, nu_w, nu_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Top principal directions of the pooled, centered samples.
    #[default]
    Pca,
    /// Orthonormalized Gaussian matrix drawn from the config seed.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrConfig {
    pub target_dim: usize,
    pub divergence: DivergenceKind,
    /// `None` selects [`auto_nu_w`].
    pub nu_w: Option<usize>,
    pub nu_b: usize,
    /// Options for the full-space divergences behind the affinity.
    pub kde: KdeOptions,
    /// Bandwidth rule applied once to the projected samples at `W0`.
    pub projected_bandwidth: BandwidthPolicy,
    pub cg: CgOptions,
    pub init: InitPolicy,
    pub seed: u64,
}

impl Default for DrConfig {
    fn default() -> Self {
        Self {
            target_dim: 2,
            divergence: DivergenceKind::HellingerSquared,
            nu_w: None,
            nu_b: 1,
            kde: KdeOptions::default(),
            projected_bandwidth: BandwidthPolicy::PerSetIsotropic,
            cg: CgOptions::default(),
            init: InitPolicy::Pca,
            seed: 0,
        }
    }
}

impl DrConfig {
    pub fn validate(&self, ambient_dim: usize) -> Result<()> {
        if self.target_dim < 1 || self.target_dim >= ambient_dim {
            return Err(Error::config(
                "dr.target_dim",
                format!("must satisfy 1 ≤ d < D = {ambient_dim}, got {}", self.target_dim),
            ));
        }
        if let Some(w) = self.nu_w {
            if self.nu_b > w {
                return Err(Error::config("dr.nu_b", format!("ν_b = {} exceeds ν_w = {w}", self.nu_b)));
            }
        }
        self.cg.validate()
    }
}

/// A set's original samples and a KDE on its projected samples.
#[derive(Debug, Clone)]
pub struct ProjectedSet {
    /// `n × D`.
    pub original: DMatrix<f64>,
    pub model: DensityModel,
}

impl ProjectedSet {
    pub fn new(set: &FeatureSet, w: &DMatrix<f64>, bandwidth: Bandwidth) -> Result<Self> {
        let projected = &set.features * w;
        Ok(Self { original: set.features.clone(), model: DensityModel::new(&projected, bandwidth)? })
    }

    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }
}

/// Bandwidths of each projected set at `w0`, to be held fixed afterwards.
pub fn frozen_bandwidths(sets: &[FeatureSet], w0: &StiefelPoint, policy: &BandwidthPolicy) -> Result<Vec<Bandwidth>> {
    sets.iter().map(|s| policy.bandwidth_for(&(&s.features * w0.matrix()))).collect()
}

/// `log p(Wᵀx)` and its derivative with respect to `W`,
/// `−Σ_k w_k u_k (Σ⁻¹ Wᵀu_k)ᵀ` with `u_k = x − x_k` and `w_k` the kernel
/// responsibilities.
fn log_density_and_grad(set: &ProjectedSet, x: &[f64], y: &[f64], skip: Option<usize>) -> (f64, DMatrix<f64>) {
    let big_d = x.len();
    let d = y.len();
    let (ld, weights) = set.model.log_density_with_weights(y, skip);
    let inv = set.model.inv_bandwidth();
    let mut grad = DMatrix::zeros(big_d, d);
    let mut v = vec![0.0; d];
    for (k, &wk) in weights.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let yk = set.model.sample(k);
        for c in 0..d {
            v[c] = wk * (y[c] - yk[c]) * inv[c];
        }
        for r in 0..big_d {
            let u = x[r] - set.original[(k, r)];
            for c in 0..d {
                grad[(r, c)] -= u * v[c];
            }
        }
    }
    (ld, grad)
}

fn project_point(x: &[f64], w: &DMatrix<f64>) -> Vec<f64> {
    (0..w.ncols()).map(|c| x.iter().enumerate().map(|(r, xr)| xr * w[(r, c)]).sum()).collect()
}

/// `∂T/∂W` at an original-space point `x`, where `T = p/(p+q)` is evaluated
/// at `Wᵀx` with both densities on projected samples.
///
/// Computed as `T(1−T)(∂log p − ∂log q)`, which equals
/// `(q ∂p − p ∂q)/(p+q)²`. Zero where `T` is clamped.
pub fn t_ratio_gradient(w: &StiefelPoint, x: &[f64], p: &ProjectedSet, q: &ProjectedSet) -> Result<DMatrix<f64>> {
    let (big_d, d) = w.matrix().shape();
    if x.len() != big_d || p.original.ncols() != big_d || q.original.ncols() != big_d {
        return Err(Error::Shape(format!("point or sets do not live in R^{big_d}")));
    }
    if p.model.dim() != d || q.model.dim() != d {
        return Err(Error::Shape(format!("projected models are not {d}-dimensional")));
    }
    let y = project_point(x, w.matrix());
    let (lp, gp) = log_density_and_grad(p, x, &y, None);
    let (lq, gq) = log_density_and_grad(q, x, &y, None);
    let t = 1.0 / (1.0 + (lq - lp).exp());
    if !(T_EPSILON..=1.0 - T_EPSILON).contains(&t) {
        return Ok(DMatrix::zeros(big_d, d));
    }
    Ok((gp - gq) * (t * (1.0 - t)))
}

/// Derivative of the symmetric-estimator summand with respect to the log
/// density gap `z = log p − log q`.
fn summand_slope(kind: DivergenceKind, z: f64) -> f64 {
    let h = 0.5 * z;
    match kind {
        // s = 1 − sech(z/2)
        DivergenceKind::HellingerSquared => 0.5 * h.tanh() / h.cosh(),
        // s = z tanh(z/2), constant beyond the clamp
        DivergenceKind::Jeffrey => {
            if z.abs() > log_odds_limit() {
                0.0
            } else {
                let sech = 1.0 / h.cosh();
                h.tanh() + h * sech * sech
            }
        }
    }
}

/// The frozen pieces of a dimensionality-reduction objective.
#[derive(Debug, Clone)]
pub struct DrProblem<'a> {
    pub sets: &'a [FeatureSet],
    pub affinity: &'a AffinityMatrix,
    pub kind: DivergenceKind,
    pub bandwidths: Vec<Bandwidth>,
    pub leave_one_out: bool,
}

impl<'a> DrProblem<'a> {
    pub fn new(
        sets: &'a [FeatureSet],
        affinity: &'a AffinityMatrix,
        kind: DivergenceKind,
        bandwidths: Vec<Bandwidth>,
        leave_one_out: bool,
    ) -> Result<Self> {
        if affinity.len() != sets.len() || bandwidths.len() != sets.len() {
            return Err(Error::Shape(format!(
                "{} sets, {}×{} affinity, {} bandwidths",
                sets.len(),
                affinity.len(),
                affinity.len(),
                bandwidths.len()
            )));
        }
        Ok(Self { sets, affinity, kind, bandwidths, leave_one_out })
    }

    fn projected(&self, w: &DMatrix<f64>) -> Result<Vec<ProjectedSet>> {
        if let Some(s) = self.sets.iter().find(|s| s.dim() != w.nrows()) {
            return Err(Error::Shape(format!("set {:?} has D = {}, projection has {} rows", s.id, s.dim(), w.nrows())));
        }
        self.sets.iter().zip(&self.bandwidths).map(|(s, b)| ProjectedSet::new(s, w, b.clone())).collect()
    }

    /// The cost formula at an arbitrary `D × d` matrix (orthonormal or not).
    pub fn cost_at(&self, w: &DMatrix<f64>) -> Result<f64> {
        let pairs = self.affinity.active_pairs();
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let prepared: Vec<PreparedSet> =
            self.projected(w)?.into_iter().map(|p| PreparedSet::new(p.model, self.leave_one_out)).collect();
        let terms: Vec<f64> =
            pairs.par_iter().map(|&(i, j, a)| a * symmetric_estimate(self.kind, &prepared[i], &prepared[j])).collect();
        Ok(terms.iter().sum())
    }

    /// Euclidean gradient of [`DrProblem::cost_at`].
    pub fn gradient_at(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let pairs = self.affinity.active_pairs();
        let mut grad = DMatrix::zeros(w.nrows(), w.ncols());
        if pairs.is_empty() {
            return Ok(grad);
        }
        let projected = self.projected(w)?;
        let terms: Vec<DMatrix<f64>> = pairs
            .par_iter()
            .map(|&(i, j, a)| pair_gradient(self.kind, &projected[i], &projected[j], self.leave_one_out) * a)
            .collect();
        for t in terms {
            grad += t;
        }
        Ok(grad)
    }
}

/// `Σ_{i<j} a(i,j) δ(WᵀX_i, WᵀX_j)`.
pub fn dr_cost(w: &StiefelPoint, problem: &DrProblem) -> Result<f64> {
    problem.cost_at(w.matrix())
}

/// `∂δ(WᵀP, WᵀQ)/∂W` for the symmetric estimator.
fn pair_gradient(kind: DivergenceKind, p: &ProjectedSet, q: &ProjectedSet, loo: bool) -> DMatrix<f64> {
    let (big_d, d) = (p.original.ncols(), p.model.dim());
    let mut total = DMatrix::zeros(big_d, d);
    for (own, other, sign) in [(p, q, 1.0), (q, p, -1.0)] {
        let n = own.len();
        let mut acc = DMatrix::zeros(big_d, d);
        for i in 0..n {
            let x: Vec<f64> = own.original.row(i).iter().copied().collect();
            let y = own.model.sample(i);
            let (l_own, g_own) = log_density_and_grad(own, &x, y, loo.then_some(i));
            let (l_other, g_other) = log_density_and_grad(other, &x, y, None);
            // z = log p − log q regardless of which set the sample came from
            let z = sign * (l_own - l_other);
            let slope = summand_slope(kind, z) * sign;
            acc += (g_own - g_other) * slope;
        }
        total += acc / n as f64;
    }
    total
}

/// Euclidean gradient of [`dr_cost`].
pub fn dr_euclidean_gradient(w: &StiefelPoint, problem: &DrProblem) -> Result<DMatrix<f64>> {
    problem.gradient_at(w.matrix())
}

/// Top-`d` principal directions of the pooled, centered samples, each
/// signed so its largest-magnitude entry is positive.
pub fn pca_init(sets: &[FeatureSet], d: usize) -> Result<StiefelPoint> {
    let big_d = sets.first().map(|s| s.dim()).ok_or_else(|| Error::InvalidArgument("no sets".into()))?;
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let mut mean = nalgebra::DVector::<f64>::zeros(big_d);
    for s in sets {
        for r in s.features.row_iter() {
            mean += r.transpose();
        }
    }
    mean /= total as f64;
    let mut cov = DMatrix::<f64>::zeros(big_d, big_d);
    for s in sets {
        for r in s.features.row_iter() {
            let c = r.transpose() - &mean;
            cov += &c * c.transpose();
        }
    }
    let eig = SymmetricEigen::new(cov / total as f64);
    let mut order: Vec<usize> = (0..big_d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut w = DMatrix::zeros(big_d, d);
    for (k, &idx) in order[..d].iter().enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let pivot = v.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
        if pivot < 0.0 {
            v.neg_mut();
        }
        w.set_column(k, &v);
    }
    StiefelPoint::orthonormalize(&w)
}

pub fn random_init(big_d: usize, d: usize, seed: u64) -> Result<StiefelPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(big_d, d, |_, _| StandardNormal.sample(&mut rng));
    StiefelPoint::orthonormalize(&g)
}

/// Result of [`learn_projection`].
#[derive(Debug, Clone)]
pub struct DrOutcome {
    pub projection: StiefelPoint,
    pub initial: StiefelPoint,
    pub trace: CgTrace,
    pub affinity: AffinityMatrix,
    pub bandwidths: Vec<Bandwidth>,
}

/// Minimizes the neighbourhood-weighted divergence cost over `G(d, D)`.
pub fn learn_projection(sets: &[FeatureSet], config: &DrConfig) -> Result<DrOutcome> {
    let big_d = sets.first().map(|s| s.dim()).ok_or_else(|| Error::InvalidArgument("no sets".into()))?;
    config.validate(big_d)?;
    let affinity = build_affinity(sets, config.nu_w, config.nu_b, config.divergence, &config.kde)?;
    let w0 = match config.init {
        InitPolicy::Pca => pca_init(sets, config.target_dim)?,
        InitPolicy::Random => random_init(big_d, config.target_dim, config.seed)?,
    };
    let bandwidths = frozen_bandwidths(sets, &w0, &config.projected_bandwidth)?;
    let problem = DrProblem::new(sets, &affinity, config.divergence, bandwidths.clone(), config.kde.leave_one_out)?;
    let (w, trace) =
        cg_minimize(|w| dr_cost(w, &problem), |w| dr_euclidean_gradient(w, &problem), w0.clone(), &config.cg)?;
    Ok(DrOutcome { projection: w, initial: w0, trace, affinity, bandwidths })
}

/// Mean within-class divergence over mean between-class divergence.
pub fn compactness_ratio(div: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let m = div.nrows();
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..m {
        for j in i + 1..m {
            if labels[i] == labels[j] {
                within += div[(i, j)];
                nw += 1;
            } else {
                between += div[(i, j)];
                nb += 1;
            }
        }
    }
    if nw == 0 || nb == 0 || between <= 0.0 {
        return Err(Error::InvalidArgument("need within- and between-class pairs".into()));
    }
    Ok((within / nw as f64) / (between / nb as f64))
}

/// Sidecar written next to a learned projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMeta {
    pub config: DrConfig,
    pub config_hash: String,
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
    pub ambient_dim: usize,
    pub target_dim: usize,
}

/// Writes `W` as CSV (`D` rows, `d` columns) and a `.json` sidecar.
pub fn save_projection(
    csv_path: &Path,
    w: &StiefelPoint,
    config: &DrConfig,
    trace_path: Option<PathBuf>,
) -> Result<()> {
    io::write_csv_matrix(csv_path, w.matrix())?;
    let meta = ProjectionMeta {
        config: config.clone(),
        config_hash: io::content_hash(config),
        trace_path,
        ambient_dim: w.ambient_dim(),
        target_dim: w.dim(),
    };
    io::write_json(&csv_path.with_extension("json"), &meta)
}

pub fn load_projection(csv_path: &Path) -> Result<StiefelPoint> {
    let m = io::read_csv_matrix(csv_path)?;
    StiefelPoint::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::manifold::tangent_project;
    use proptest::prelude::*;

    fn toy_sets(seed: u64, big_d: usize, n: usize) -> Vec<FeatureSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4)
            .map(|k| {
                let shift = if k < 2 { 0.0 } else { 1.5 };
                let m = DMatrix::from_fn(n, big_d, |_, c| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    e + if c == 0 { shift } else { 0.0 }
                });
                FeatureSet::new(format!("s{k}"), k / 2, m).unwrap()
            })
            .collect()
    }

    fn full_affinity(labels: &[usize]) -> AffinityMatrix {
        let m = labels.len();
        let values = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                0.0
            } else if labels[i] == labels[j] {
                1.0
            } else {
                -1.0
            }
        });
        AffinityMatrix { values, nu_w: 1, nu_b: 1 }
    }

    fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        StiefelPoint::orthonormalize(&g).unwrap().into_matrix()
    }

    #[test]
    fn affinity_two_by_two() {
        let div = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.1, 5.0, 5.2, //
                0.1, 0.0, 5.1, 5.3, //
                5.0, 5.1, 0.0, 0.1, //
                5.2, 5.3, 0.1, 0.0,
            ],
        );
        let a = affinity_from_divergences(&div, &[0, 0, 1, 1], Some(1), 1).unwrap();
        assert_eq!(a.values[(0, 1)], 1.0);
        assert_eq!(a.values[(2, 3)], 1.0);
        // nearest cross pairs: 0↔2 (for 0 and 2), 1↔2 (for 1), 3→0
        assert_eq!(a.values[(0, 2)], -1.0);
        assert_eq!(a.values[(1, 2)], -1.0);
        assert_eq!(a.values[(0, 3)], -1.0);
        assert_eq!(a.values[(1, 3)], 0.0);
        assert_eq!(a.values, a.values.transpose());
        assert!((0..4).all(|i| a.values[(i, i)] == 0.0));

        let none = affinity_from_divergences(&div, &[0, 0, 1, 1], Some(1), 0).unwrap();
        assert!(none.values.iter().all(|&v| v >= 0.0));
        assert!(affinity_from_divergences(&div, &[0, 0, 1, 1], Some(1), 2).is_err());
    }

    #[test]
    fn auto_nu_w_is_min_class_size_minus_one() {
        assert_eq!(auto_nu_w(&[0, 0, 0, 1, 1, 2, 2, 2, 2]), 1);
        assert_eq!(auto_nu_w(&[0, 0, 0, 1, 1, 1]), 2);
    }

    #[test]
    fn zero_affinity_gives_zero_cost_and_gradient() {
        let sets = toy_sets(1, 4, 6);
        let w = random_init(4, 2, 2).unwrap();
        let aff = AffinityMatrix { values: DMatrix::zeros(4, 4), nu_w: 0, nu_b: 0 };
        let bw = frozen_bandwidths(&sets, &w, &BandwidthPolicy::PerSetIsotropic).unwrap();
        let prob = DrProblem::new(&sets, &aff, DivergenceKind::HellingerSquared, bw, false).unwrap();
        assert_eq!(dr_cost(&w, &prob).unwrap(), 0.0);
        assert_eq!(dr_euclidean_gradient(&w, &prob).unwrap().amax(), 0.0);
    }

    #[test]
    fn identical_sets_cost_nothing_and_pull_nowhere() {
        let base = toy_sets(3, 4, 6).remove(0);
        let sets: Vec<FeatureSet> =
            (0..3).map(|k| FeatureSet::new(format!("d{k}"), 0, base.features.clone()).unwrap()).collect();
        let aff = full_affinity(&[0, 0, 0]);
        let w = random_init(4, 2, 4).unwrap();
        for kind in [DivergenceKind::HellingerSquared, DivergenceKind::Jeffrey] {
            let bw = frozen_bandwidths(&sets, &w, &BandwidthPolicy::PerSetIsotropic).unwrap();
            let prob = DrProblem::new(&sets, &aff, kind, bw, false).unwrap();
            assert_eq!(dr_cost(&w, &prob).unwrap(), 0.0);
            assert!(dr_euclidean_gradient(&w, &prob).unwrap().amax() < 1e-12);
        }
    }

    #[test]
    fn t_ratio_gradient_vanishes_for_equal_models() {
        let sets = toy_sets(5, 4, 6);
        let w = random_init(4, 2, 6).unwrap();
        let bw = Bandwidth::isotropic(0.7, 2).unwrap();
        let p = ProjectedSet::new(&sets[0], w.matrix(), bw.clone()).unwrap();
        let x = [0.3, -0.2, 1.1, 0.4];
        let g = t_ratio_gradient(&w, &x, &p, &p.clone()).unwrap();
        assert!(g.amax() < 1e-12);
    }

    #[test]
    fn t_ratio_gradient_ignores_common_kernel_scale() {
        // duplicating every sample of both sets leaves T unchanged
        let sets = toy_sets(7, 4, 5);
        let doubled: Vec<FeatureSet> = sets[..2]
            .iter()
            .map(|s| {
                let f = DMatrix::from_fn(2 * s.len(), 4, |r, c| s.features[(r % s.len(), c)]);
                FeatureSet::new(s.id.clone(), s.label, f).unwrap()
            })
            .collect();
        let w = random_init(4, 2, 8).unwrap();
        let bw = Bandwidth::isotropic(0.5, 2).unwrap();
        let ps = |s: &FeatureSet| ProjectedSet::new(s, w.matrix(), bw.clone()).unwrap();
        let x = [0.1, 0.5, -0.3, 0.2];
        let a = t_ratio_gradient(&w, &x, &ps(&sets[0]), &ps(&sets[1])).unwrap();
        let b = t_ratio_gradient(&w, &x, &ps(&doubled[0]), &ps(&doubled[1])).unwrap();
        assert!((&a - &b).amax() < 1e-12 * a.amax().max(1.0));
    }

    fn t_of(w: &DMatrix<f64>, x: &[f64], sp: &FeatureSet, sq: &FeatureSet, bp: &Bandwidth, bq: &Bandwidth) -> f64 {
        let p = DensityModel::new(&(&sp.features * w), bp.clone()).unwrap();
        let q = DensityModel::new(&(&sq.features * w), bq.clone()).unwrap();
        let y = project_point(x, w);
        crate::divergence::t_ratio(p.log_density(&y), q.log_density(&y))
    }

    #[test]
    fn t_ratio_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let sets = toy_sets(100 + trial, 4, 6);
            let w = random_init(4, 2, 200 + trial).unwrap();
            let bp = Bandwidth::new(vec![0.8, 1.3]).unwrap();
            let bq = Bandwidth::new(vec![1.1, 0.6]).unwrap();
            let x: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let p = ProjectedSet::new(&sets[0], w.matrix(), bp.clone()).unwrap();
            let q = ProjectedSet::new(&sets[2], w.matrix(), bq.clone()).unwrap();
            let g = t_ratio_gradient(&w, &x, &p, &q).unwrap();
            let h = 1e-6;
            let mut fd = DMatrix::zeros(4, 2);
            for r in 0..4 {
                for c in 0..2 {
                    let mut wp = w.matrix().clone();
                    let mut wm = w.matrix().clone();
                    wp[(r, c)] += h;
                    wm[(r, c)] -= h;
                    fd[(r, c)] = (t_of(&wp, &x, &sets[0], &sets[2], &bp, &bq)
                        - t_of(&wm, &x, &sets[0], &sets[2], &bp, &bq))
                        / (2.0 * h);
                }
            }
            let rel = (&g - &fd).amax() / fd.amax().max(1e-8);
            assert!(rel <= 1e-4, "trial {trial}: {rel}");
        }
    }

    /// Central differences of the cost in the ambient coordinates of `W`.
    fn fd_gradient(w: &StiefelPoint, prob: &DrProblem, h: f64) -> DMatrix<f64> {
        let (big_d, d) = w.matrix().shape();
        DMatrix::from_fn(big_d, d, |r, c| {
            let mut wp = w.matrix().clone();
            let mut wm = w.matrix().clone();
            wp[(r, c)] += h;
            wm[(r, c)] -= h;
            (prob.cost_at(&wp).unwrap() - prob.cost_at(&wm).unwrap()) / (2.0 * h)
        })
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for kind in [DivergenceKind::HellingerSquared, DivergenceKind::Jeffrey] {
            for trial in 0..5 {
                let sets = toy_sets(300 + trial, 4, 6);
                let labels: Vec<usize> = sets.iter().map(|s| s.label).collect();
                let aff = full_affinity(&labels);
                let w = random_init(4, 2, 400 + trial).unwrap();
                let bw = frozen_bandwidths(&sets, &w, &BandwidthPolicy::PerSetIsotropic).unwrap();
                for loo in [false, true] {
                    let prob = DrProblem::new(&sets, &aff, kind, bw.clone(), loo).unwrap();
                    let g = dr_euclidean_gradient(&w, &prob).unwrap();
                    let fd = fd_gradient(&w, &prob, 1e-5);
                    let rel = (&g - &fd).norm() / fd.norm().max(1e-12);
                    assert!(rel <= 1e-3, "{kind:?} trial {trial} loo {loo}: {rel}");
                    let rel_t = (tangent_project(&w, &g).unwrap() - tangent_project(&w, &fd).unwrap()).norm()
                        / tangent_project(&w, &fd).unwrap().norm().max(1e-12);
                    assert!(rel_t <= 1e-3, "{rel_t}");
                }
            }
        }
    }

    #[test]
    fn learning_reduces_cost_and_keeps_orthonormality() {
        let ds = generate_synthetic(&SyntheticSpec {
            classes: 2,
            sets_per_class: 3,
            samples_per_set: 10,
            dim: 5,
            class_separation: 2.0,
            within_class_jitter: 0.3,
            seed: 11,
        })
        .unwrap();
        for target_dim in [2, 4] {
            let cfg =
                DrConfig { target_dim, cg: CgOptions { max_iters: 15, ..Default::default() }, ..Default::default() };
            let out = learn_projection(&ds.sets, &cfg).unwrap();
            assert!(out.trace.is_non_increasing());
            let w = out.projection.matrix();
            assert!((w.transpose() * w - DMatrix::identity(target_dim, target_dim)).amax() < 1e-10);
        }
    }

    #[test]
    fn pca_init_is_deterministic_and_orthonormal() {
        let sets = toy_sets(12, 5, 8);
        let a = pca_init(&sets, 2).unwrap();
        assert_eq!(a, pca_init(&sets, 2).unwrap());
        assert!(random_init(5, 2, 1).unwrap() != random_init(5, 2, 2).unwrap());
    }

    #[test]
    fn config_rejects_bad_dimension() {
        assert!(DrConfig { target_dim: 4, ..Default::default() }.validate(4).is_err());
        assert!(DrConfig { target_dim: 0, ..Default::default() }.validate(4).is_err());
        assert!(DrConfig { nu_w: Some(1), nu_b: 2, ..Default::default() }.validate(4).is_err());
    }

    #[test]
    fn projection_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let w = random_init(6, 3, 13).unwrap();
        save_projection(&path, &w, &DrConfig::default(), None).unwrap();
        assert_eq!(load_projection(&path).unwrap(), w);
        let meta: ProjectionMeta = io::read_json(&dir.path().join("w.json")).unwrap();
        assert_eq!(meta.config_hash, io::content_hash(&DrConfig::default()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn cost_is_basis_invariant(seed in any::<u64>(), jeffrey in any::<bool>()) {
            let kind = if jeffrey { DivergenceKind::Jeffrey } else { DivergenceKind::HellingerSquared };
            let sets = toy_sets(seed, 4, 6);
            let labels: Vec<usize> = sets.iter().map(|s| s.label).collect();
            let aff = full_affinity(&labels);
            let w = random_init(4, 2, seed ^ 1).unwrap();
            let bw = frozen_bandwidths(&sets, &w, &BandwidthPolicy::PerSetIsotropic).unwrap();
            let prob = DrProblem::new(&sets, &aff, kind, bw, false).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
            let r = random_orthogonal(2, &mut rng);
            let wr = StiefelPoint::orthonormalize(&(w.matrix() * r)).unwrap();
            let a = dr_cost(&w, &prob).unwrap();
            let b = dr_cost(&wr, &prob).unwrap();
            prop_assert!((a - b).abs() <= 1e-8, "{} vs {}", a, b);
        }

        #[test]
        fn affinity_entries_are_consistent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 9;
            let labels: Vec<usize> = (0..m).map(|i| i % 3).collect();
            let mut div = DMatrix::from_fn(m, m, |_, _| rand::Rng::random::<f64>(&mut rng));
            div = &div + div.transpose();
            let a = affinity_from_divergences(&div, &labels, None, 1).unwrap();
            for i in 0..m {
                prop_assert_eq!(a.values[(i, i)], 0.0);
                for j in 0..m {
                    let v = a.values[(i, j)];
                    prop_assert_eq!(v, a.values[(j, i)]);
                    if v == 1.0 { prop_assert_eq!(labels[i], labels[j]); }
                    if v == -1.0 { prop_assert!(labels[i] != labels[j]); }
                }
            }
        }
    }
}
