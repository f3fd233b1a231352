//! Empirical Hellinger and Jeffrey divergences between sample sets.
//!
//! Both symmetric estimators are written in terms of the ratio
//! `T(x) = p̂(x) / (p̂(x) + q̂(x))`, averaged over the samples of *both* sets:
//!
//! ```text
//! δ_H² ≈ 1/n_p Σ_{x∈P} (√T − √(1−T))²      + 1/n_q Σ_{x∈Q} (√T − √(1−T))²
//! δ_J  ≈ 1/n_p Σ_{x∈P} (2T−1) ln(T/(1−T))  + 1/n_q Σ_{x∈Q} (2T−1) ln(T/(1−T))
//! ```
//!
//! `T` is a logistic function of the log-density gap `z = log p̂ − log q̂`.
//! The Jeffrey summand uses `T` clamped to `[ε, 1−ε]` with `ε = 1e-12`, so
//! `ln(T/(1−T))` is clipped to `±ln((1−ε)/ε)`; the Hellinger summand is
//! bounded by 1 and uses `T` unclamped. Each summand depends on `|z|` only,
//! which makes `δ(P,Q)` and `δ(Q,P)` bit-for-bit identical.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSet;
use crate::density::{fit_with_policy, DensityModel, KdeOptions};
use crate::error::{Error, Result};
use crate::io;

/// Clamp applied to `T` before it enters any summand.
pub const T_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    #[serde(alias = "hellinger")]
    HellingerSquared,
    Jeffrey,
}

impl DivergenceKind {
    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::HellingerSquared => "hellinger",
            DivergenceKind::Jeffrey => "jeffrey",
        }
    }

    /// Largest value the estimator can return.
    pub fn upper_bound(self) -> f64 {
        match self {
            DivergenceKind::HellingerSquared => 2.0,
            DivergenceKind::Jeffrey => 2.0 * Self::Jeffrey.summand_from_gap(f64::INFINITY),
        }
    }

    /// Per-sample summand as a function of `T`; the Jeffrey summand clamps `T`.
    pub fn summand(self, t: f64) -> f64 {
        match self {
            DivergenceKind::HellingerSquared => {
                let d = t.sqrt() - (1.0 - t).sqrt();
                d * d
            }
            DivergenceKind::Jeffrey => {
                let t = t.clamp(T_EPSILON, 1.0 - T_EPSILON);
                (2.0 * t - 1.0) * (t / (1.0 - t)).ln()
            }
        }
    }

    /// Per-sample summand as a function of `|log p − log q|`.
    ///
    /// Evaluated without forming `1 − T` by subtraction:
    /// `(√T − √(1−T))² = (1 − √s)² / (1 + s)` with `s = e^{−|z|}`, and
    /// `(2T−1) ln(T/(1−T)) = tanh(z/2)·z` with `z` clipped at `ln((1−ε)/ε)`.
    pub fn summand_from_gap(self, gap: f64) -> f64 {
        let gap = gap.abs();
        match self {
            DivergenceKind::HellingerSquared => {
                let s = (-gap).exp();
                let d = 1.0 - s.sqrt();
                d * d / (1.0 + s)
            }
            DivergenceKind::Jeffrey => {
                let z = gap.min(log_odds_limit());
                (0.5 * z).tanh() * z
            }
        }
    }
}

/// `ln((1−ε)/ε)`, the largest log-odds the clamped `T` can express.
pub fn log_odds_limit() -> f64 {
    ((1.0 - T_EPSILON) / T_EPSILON).ln()
}

impl std::str::FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hellinger" | "h" | "hellinger_squared" => Ok(DivergenceKind::HellingerSquared),
            "jeffrey" | "j" => Ok(DivergenceKind::Jeffrey),
            other => Err(Error::InvalidArgument(format!("unknown divergence {other:?}"))),
        }
    }
}

/// Unclamped logistic of `log_p − log_q`.
#[inline]
pub(crate) fn logistic_ratio(log_p: f64, log_q: f64) -> f64 {
    1.0 / (1.0 + (log_q - log_p).exp())
}

/// `T = p/(p+q)` from log-densities, clamped to `[ε, 1−ε]`.
#[inline]
pub fn t_ratio(log_p: f64, log_q: f64) -> f64 {
    logistic_ratio(log_p, log_q).clamp(T_EPSILON, 1.0 - T_EPSILON)
}

#[inline]
fn symmetric_summand(kind: DivergenceKind, log_p: f64, log_q: f64) -> f64 {
    kind.summand_from_gap(log_p - log_q)
}

/// A fitted density together with its log-density at each of its own samples.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub model: DensityModel,
    own_log: Vec<f64>,
}

impl PreparedSet {
    pub fn new(model: DensityModel, leave_one_out: bool) -> Self {
        let own_log = (0..model.len()).into_par_iter().map(|i| model.log_density_at_own(i, leave_one_out)).collect();
        Self { model, own_log }
    }

    pub fn fit(set: &FeatureSet, opts: &KdeOptions) -> Result<Self> {
        Ok(Self::new(fit_with_policy(set, &opts.bandwidth)?, opts.leave_one_out))
    }

    pub fn own_log_densities(&self) -> &[f64] {
        &self.own_log
    }
}

/// Mean over `a`'s samples of `f(log a(x), log b(x))`.
fn mean_over<F>(a: &PreparedSet, b: &PreparedSet, f: F) -> f64
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    let terms: Vec<f64> =
        (0..a.model.len()).into_par_iter().map(|i| f(a.own_log[i], b.model.log_density(a.model.sample(i)))).collect();
    terms.iter().sum::<f64>() / terms.len() as f64
}

fn check_dims(p: &FeatureSet, q: &FeatureSet) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            first: p.id.clone(),
            first_dim: p.dim(),
            other: q.id.clone(),
            other_dim: q.dim(),
        });
    }
    Ok(())
}

/// Symmetric estimator on already-fitted densities.
pub fn symmetric_estimate(kind: DivergenceKind, p: &PreparedSet, q: &PreparedSet) -> f64 {
    let over_p = mean_over(p, q, |lp, lq| symmetric_summand(kind, lp, lq));
    let over_q = mean_over(q, p, |lq, lp| symmetric_summand(kind, lp, lq));
    over_p + over_q
}

pub fn empirical(kind: DivergenceKind, p: &FeatureSet, q: &FeatureSet, opts: &KdeOptions) -> Result<f64> {
    check_dims(p, q)?;
    let pp = PreparedSet::fit(p, opts)?;
    let pq = PreparedSet::fit(q, opts)?;
    Ok(symmetric_estimate(kind, &pp, &pq))
}

/// Symmetric empirical δ_H², in `[0, 2]`.
pub fn hellinger_empirical(p: &FeatureSet, q: &FeatureSet, opts: &KdeOptions) -> Result<f64> {
    empirical(DivergenceKind::HellingerSquared, p, q, opts)
}

/// Symmetric empirical Jeffrey divergence, `≥ 0` and finite.
pub fn jeffrey_empirical(p: &FeatureSet, q: &FeatureSet, opts: &KdeOptions) -> Result<f64> {
    empirical(DivergenceKind::Jeffrey, p, q, opts)
}

/// Which set's samples carry the expectation of the naive estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NaiveDirection {
    /// `1/n_p Σ_{x∈P} (1 − √(q̂/p̂))²`
    OverP,
    /// `1/n_q Σ_{x∈Q} (1 − √(p̂/q̂))²`
    OverQ,
}

/// Asymmetric plug-in Hellinger estimator, kept for comparison with the
/// symmetric one.
pub fn hellinger_naive(p: &FeatureSet, q: &FeatureSet, direction: NaiveDirection, opts: &KdeOptions) -> Result<f64> {
    check_dims(p, q)?;
    let pp = PreparedSet::fit(p, opts)?;
    let pq = PreparedSet::fit(q, opts)?;
    let term = |own: f64, other: f64| {
        let r = 1.0 - (0.5 * (other - own)).exp();
        r * r
    };
    Ok(match direction {
        NaiveDirection::OverP => mean_over(&pp, &pq, term),
        NaiveDirection::OverQ => mean_over(&pq, &pp, term),
    })
}

/// Symmetric matrix of pairwise divergences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMatrix {
    #[serde(skip)]
    pub values: DMatrix<f64>,
    pub kind: DivergenceKind,
    pub ids: Vec<String>,
    pub kde: KdeOptions,
}

impl DivergenceMatrix {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Writes the values as CSV and `{kind, ids, kde}` to a `.json` sidecar
    /// next to it.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        io::write_csv_matrix(csv_path, &self.values)?;
        io::write_json(&csv_path.with_extension("json"), self)
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let mut meta: DivergenceMatrix = io::read_json(&csv_path.with_extension("json"))?;
        meta.values = io::read_csv_matrix(csv_path)?;
        Ok(meta)
    }
}

pub(crate) fn prepare_all(sets: &[FeatureSet], opts: &KdeOptions) -> Result<Vec<PreparedSet>> {
    if let Some(first) = sets.first() {
        for s in sets {
            check_dims(first, s)?;
        }
    }
    sets.par_iter().map(|s| PreparedSet::fit(s, opts)).collect()
}

/// Pairwise divergences; one KDE per set, each unordered pair evaluated once.
pub fn divergence_matrix(sets: &[FeatureSet], kind: DivergenceKind, opts: &KdeOptions) -> Result<DivergenceMatrix> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("no sets given".into()));
    }
    let prepared = prepare_all(sets, opts)?;
    let values = matrix_from_prepared(&prepared, kind);
    Ok(DivergenceMatrix { values, kind, ids: sets.iter().map(|s| s.id.clone()).collect(), kde: opts.clone() })
}

pub(crate) fn matrix_from_prepared(prepared: &[PreparedSet], kind: DivergenceKind) -> DMatrix<f64> {
    let m = prepared.len();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs.par_iter().map(|&(i, j)| symmetric_estimate(kind, &prepared[i], &prepared[j])).collect();
    let mut out = DMatrix::zeros(m, m);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        out[(i, j)] = v;
        out[(j, i)] = v;
    }
    out
}

/// `g × q` matrix of divergences between gallery rows and probe columns.
pub fn cross_divergences(
    gallery: &[FeatureSet],
    probe: &[FeatureSet],
    kind: DivergenceKind,
    opts: &KdeOptions,
) -> Result<DMatrix<f64>> {
    let g = prepare_all(gallery, opts)?;
    let p = prepare_all(probe, opts)?;
    if let (Some(a), Some(b)) = (gallery.first(), probe.first()) {
        check_dims(a, b)?;
    }
    let cells: Vec<(usize, usize)> = (0..g.len()).flat_map(|i| (0..p.len()).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = cells.par_iter().map(|&(i, j)| symmetric_estimate(kind, &g[i], &p[j])).collect();
    Ok(DMatrix::from_row_iterator(g.len(), p.len(), vals))
}
