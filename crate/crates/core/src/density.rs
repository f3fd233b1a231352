//! Gaussian kernel density estimation with diagonal bandwidth, evaluated in
//! the log domain.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSet;
use crate::error::{Error, Result};

/// Diagonal of the KDE bandwidth matrix Σ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    diag: Vec<f64>,
}

impl Bandwidth {
    pub fn new(diag: Vec<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::InvalidArgument("bandwidth has no entries".into()));
        }
        if let Some(v) = diag.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!("bandwidth entries must be positive and finite, got {v}")));
        }
        Ok(Self { diag })
    }

    pub fn isotropic(variance: f64, dim: usize) -> Result<Self> {
        Self::new(vec![variance; dim])
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }
}

/// How bandwidths are chosen when a density is fitted to a set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum BandwidthPolicy {
    /// Per-set, per-dimension Silverman rule.
    #[default]
    PerSetSilverman,
    /// Per-set Silverman rule on the mean per-dimension variance (Σ = h²I).
    /// Unchanged by rotations of the sample space.
    PerSetIsotropic,
    /// One isotropic bandwidth shared by every set.
    SharedIsotropic { variance: f64 },
}

impl BandwidthPolicy {
    /// Shared isotropic bandwidth from the isotropic Silverman rule on the pooled samples.
    pub fn shared_from_pool(sets: &[&FeatureSet]) -> Result<Self> {
        let dim = sets.first().ok_or_else(|| Error::InvalidArgument("no sets to pool".into()))?.dim();
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let mut pooled = DMatrix::zeros(total, dim);
        let mut r = 0;
        for s in sets {
            for row in s.features.row_iter() {
                pooled.set_row(r, &row);
                r += 1;
            }
        }
        let bw = isotropic_silverman_bandwidth(&pooled);
        Ok(BandwidthPolicy::SharedIsotropic { variance: bw.diag[0] })
    }

    pub fn bandwidth_for(&self, samples: &DMatrix<f64>) -> Result<Bandwidth> {
        match self {
            BandwidthPolicy::PerSetSilverman => Ok(silverman_bandwidth(samples)),
            BandwidthPolicy::PerSetIsotropic => Ok(isotropic_silverman_bandwidth(samples)),
            BandwidthPolicy::SharedIsotropic { variance } => Bandwidth::isotropic(*variance, samples.ncols()),
        }
    }
}

/// Bandwidth policy plus evaluation options shared by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct KdeOptions {
    #[serde(default)]
    pub bandwidth: BandwidthPolicy,
    /// Drop a sample's own kernel term when a density is evaluated at that sample.
    #[serde(default)]
    pub leave_one_out: bool,
}

fn column_variances(samples: &DMatrix<f64>) -> Vec<f64> {
    let n = samples.nrows() as f64;
    samples
        .column_iter()
        .map(|c| {
            let m = c.sum() / n;
            c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
        })
        .collect()
}

fn silverman_factor(n: usize, dim: usize) -> f64 {
    let d = dim as f64;
    (4.0 / ((d + 2.0) * n as f64)).powf(1.0 / (d + 4.0))
}

/// Silverman's rule per dimension: `h_j² = (σ_j · (4/((D+2)n))^{1/(D+4)})²`,
/// floored at `1e-12 · (1 + mean σ_j²)`.
pub fn silverman_bandwidth(samples: &DMatrix<f64>) -> Bandwidth {
    let var = column_variances(samples);
    let factor = silverman_factor(samples.nrows(), samples.ncols());
    let floor = 1e-12 * (1.0 + var.iter().sum::<f64>() / var.len() as f64);
    let diag = var.iter().map(|v| (v.sqrt() * factor).powi(2).max(floor)).collect();
    Bandwidth { diag }
}

/// Silverman's rule applied to the mean per-dimension variance, giving Σ = h²I.
pub fn isotropic_silverman_bandwidth(samples: &DMatrix<f64>) -> Bandwidth {
    let var = column_variances(samples);
    let mean_var = var.iter().sum::<f64>() / var.len() as f64;
    let factor = silverman_factor(samples.nrows(), samples.ncols());
    let h2 = (factor * factor * mean_var).max(1e-12 * (1.0 + mean_var));
    Bandwidth { diag: vec![h2; samples.ncols()] }
}

/// A fitted KDE `p̂(x) = 1/(n√det(2πΣ)) Σ_i exp(−½ (x−x_i)ᵀ Σ⁻¹ (x−x_i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    /// Row-major `n × D`.
    samples: Vec<f64>,
    n: usize,
    dim: usize,
    bandwidth: Bandwidth,
    inv_diag: Vec<f64>,
    log_norm: f64,
}

impl DensityModel {
    pub fn new(samples: &DMatrix<f64>, bandwidth: Bandwidth) -> Result<Self> {
        let (n, dim) = samples.shape();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("KDE needs n ≥ 2 samples, got {n}")));
        }
        if bandwidth.dim() != dim {
            return Err(Error::Shape(format!("bandwidth has {} entries for D = {dim}", bandwidth.dim())));
        }
        let mut flat = Vec::with_capacity(n * dim);
        for i in 0..n {
            for j in 0..dim {
                flat.push(samples[(i, j)]);
            }
        }
        let inv_diag = bandwidth.diag.iter().map(|h| 1.0 / h).collect();
        let half_log_det: f64 = bandwidth.diag.iter().map(|h| (2.0 * PI * h).ln()).sum::<f64>() * 0.5;
        Ok(Self { samples: flat, n, dim, bandwidth, inv_diag, log_norm: -(n as f64).ln() - half_log_det })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> &Bandwidth {
        &self.bandwidth
    }

    /// `−log n − ½ log det(2πΣ)`.
    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn inv_bandwidth(&self) -> &[f64] {
        &self.inv_diag
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// `log p̂(x)`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_excluding(x, None)
    }

    /// `log p̂(x)` with kernel term `skip` removed and the normalizer adjusted
    /// to `n − 1` terms.
    pub fn log_density_excluding(&self, x: &[f64], skip: Option<usize>) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let mut max = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(self.n);
        for i in 0..self.n {
            if Some(i) == skip {
                continue;
            }
            let e = self.exponent(x, i);
            if e > max {
                max = e;
            }
            exps.push(e);
        }
        let sum: f64 = exps.iter().map(|e| (e - max).exp()).sum();
        max + sum.ln() + self.norm_for(skip)
    }

    /// Log-density together with the normalized kernel responsibilities
    /// `w_i = k_i / Σ_k k_k` (zero at `skip`).
    pub fn log_density_with_weights(&self, x: &[f64], skip: Option<usize>) -> (f64, Vec<f64>) {
        let mut exps = vec![f64::NEG_INFINITY; self.n];
        let mut max = f64::NEG_INFINITY;
        for (i, slot) in exps.iter_mut().enumerate() {
            if Some(i) == skip {
                continue;
            }
            *slot = self.exponent(x, i);
            if *slot > max {
                max = *slot;
            }
        }
        let mut weights: Vec<f64> = exps.iter().map(|e| (e - max).exp()).collect();
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        (max + sum.ln() + self.norm_for(skip), weights)
    }

    /// Density at this model's own `i`-th sample, honouring leave-one-out.
    pub fn log_density_at_own(&self, i: usize, leave_one_out: bool) -> f64 {
        let skip = leave_one_out.then_some(i);
        self.log_density_excluding(self.sample(i), skip)
    }

    fn norm_for(&self, skip: Option<usize>) -> f64 {
        match skip {
            Some(_) => self.log_norm + (self.n as f64).ln() - ((self.n - 1) as f64).ln(),
            None => self.log_norm,
        }
    }

    #[inline]
    fn exponent(&self, x: &[f64], i: usize) -> f64 {
        let s = self.sample(i);
        let mut q = 0.0;
        for j in 0..self.dim {
            let d = x[j] - s[j];
            q += d * d * self.inv_diag[j];
        }
        -0.5 * q
    }
}

/// Fits a KDE to a set; `None` selects [`silverman_bandwidth`].
pub fn fit_kde(set: &FeatureSet, bandwidth: Option<Bandwidth>) -> Result<DensityModel> {
    let bw = match bandwidth {
        Some(b) => b,
        None => silverman_bandwidth(&set.features),
    };
    DensityModel::new(&set.features, bw)
}

pub fn fit_with_policy(set: &FeatureSet, policy: &BandwidthPolicy) -> Result<DensityModel> {
    DensityModel::new(&set.features, policy.bandwidth_for(&set.features)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, steps: usize) -> f64 {
        let h = (b - a) / steps as f64;
        let mut s = 0.5 * (f(a) + f(b));
        for k in 1..steps {
            s += f(a + k as f64 * h);
        }
        s * h
    }

    #[test]
    fn degenerate_dimension_gets_floor() {
        let mut x = gaussian(10, 2, 1);
        x.column_mut(1).fill(3.0);
        let bw = silverman_bandwidth(&x);
        let var = column_variances(&x);
        let floor = 1e-12 * (1.0 + (var[0] + var[1]) / 2.0);
        assert_eq!(bw.diag()[1], floor);
        assert!(bw.diag()[1] > 0.0);
    }

    #[test]
    fn silverman_one_dim_hand_value() {
        let raw = gaussian(100, 1, 3);
        let m = raw.mean();
        let sd = ((raw.iter().map(|v| (v - m).powi(2)).sum::<f64>()) / 99.0).sqrt();
        let x = raw.map(|v| (v - m) / sd);
        let expected = (4.0f64 / 300.0).powf(2.0 / 5.0);
        let got = silverman_bandwidth(&x).diag()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.178).abs() < 1e-3);
    }

    #[test]
    fn silverman_is_quadratically_homogeneous() {
        let x = gaussian(30, 3, 4);
        let a = silverman_bandwidth(&x);
        let b = silverman_bandwidth(&(&x * 2.5));
        for (u, v) in a.diag().iter().zip(b.diag()) {
            assert!((v / u - 6.25).abs() < 1e-12);
        }
    }

    #[test]
    fn two_duplicate_samples_at_origin() {
        let x = DMatrix::zeros(2, 1);
        let model = DensityModel::new(&x, Bandwidth::new(vec![1.0]).unwrap()).unwrap();
        let expected = -(2.0 * PI).sqrt().ln();
        assert!((model.log_density(&[0.0]) - expected).abs() < 1e-14);
    }

    #[test]
    fn far_point_is_finite() {
        let x = gaussian(20, 3, 5);
        let model = fit_kde(&FeatureSet::new("a", 0, x).unwrap(), None).unwrap();
        let v = model.log_density(&[1e6, -1e6, 3e5]);
        assert!(v.is_finite() && v < -1e9);
    }

    #[test]
    fn auto_bandwidth_matches_silverman_and_is_pure() {
        let x = gaussian(15, 2, 6);
        let set = FeatureSet::new("a", 0, x.clone()).unwrap();
        let a = fit_kde(&set, None).unwrap();
        let b = fit_kde(&set, None).unwrap();
        assert_eq!(a.bandwidth(), &silverman_bandwidth(&x));
        let probes = gaussian(10, 2, 7);
        for r in probes.row_iter() {
            let p: Vec<f64> = r.iter().copied().collect();
            assert_eq!(a.log_density(&p), b.log_density(&p));
        }
    }

    #[test]
    fn integrates_to_one_in_one_dimension() {
        let x = gaussian(40, 1, 8);
        let model = fit_kde(&FeatureSet::new("a", 0, x.clone()).unwrap(), None).unwrap();
        let h = model.bandwidth().diag()[0].sqrt();
        let (lo, hi) = (x.min() - 8.0 * h, x.max() + 8.0 * h);
        let integral = trapezoid(|t| model.log_density(&[t]).exp(), lo, hi, 20_000);
        assert!((integral - 1.0).abs() < 1e-3, "{integral}");
    }

    #[test]
    fn integrates_to_one_in_two_dimensions() {
        let x = gaussian(12, 2, 9);
        let model = fit_kde(&FeatureSet::new("a", 0, x.clone()).unwrap(), None).unwrap();
        let h: Vec<f64> = model.bandwidth().diag().iter().map(|v| v.sqrt()).collect();
        let lo0 = x.column(0).min() - 8.0 * h[0];
        let hi0 = x.column(0).max() + 8.0 * h[0];
        let lo1 = x.column(1).min() - 8.0 * h[1];
        let hi1 = x.column(1).max() + 8.0 * h[1];
        let integral = trapezoid(|u| trapezoid(|v| model.log_density(&[u, v]).exp(), lo1, hi1, 600), lo0, hi0, 600);
        assert!((integral - 1.0).abs() < 1e-3, "{integral}");
    }

    #[test]
    fn leave_one_out_drops_own_term() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 5.0]);
        let model = DensityModel::new(&x, Bandwidth::new(vec![1.0]).unwrap()).unwrap();
        let lo = model.log_density_at_own(0, true);
        let direct = ((-0.5f64).exp() + (-12.5f64).exp()) / (2.0 * (2.0 * PI).sqrt());
        assert!((lo - direct.ln()).abs() < 1e-13);
        let with_self = model.log_density_at_own(0, false);
        assert!(with_self > lo);
    }

    #[test]
    fn weights_sum_to_one() {
        let x = gaussian(9, 2, 10);
        let model = fit_kde(&FeatureSet::new("a", 0, x).unwrap(), None).unwrap();
        let (lp, w) = model.log_density_with_weights(&[0.3, -0.2], Some(4));
        assert_eq!(w[4], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((lp - model.log_density_excluding(&[0.3, -0.2], Some(4))).abs() < 1e-14);
    }

    fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
        gaussian(d, d, seed).qr().q()
    }

    proptest! {
        #[test]
        fn isotropic_density_rotation_equivariant(seed in 0u64..1000, d in 1usize..5) {
            let x = gaussian(8, d, seed);
            let r = random_orthogonal(d, seed + 1);
            let bw = Bandwidth::isotropic(0.7, d).unwrap();
            let a = DensityModel::new(&x, bw.clone()).unwrap();
            let b = DensityModel::new(&(&x * r.transpose()), bw).unwrap();
            let probe = DVector::from_iterator(d, gaussian(1, d, seed + 2).iter().copied());
            let rp = &r * &probe;
            let la = a.log_density(probe.as_slice());
            let lb = b.log_density(rp.as_slice());
            prop_assert!((la - lb).abs() < 1e-10);
        }

        #[test]
        fn log_density_never_nan(seed in 0u64..1000, scale in -8.0f64..8.0) {
            let x = gaussian(6, 3, seed);
            let model = fit_kde(&FeatureSet::new("a", 0, x).unwrap(), None).unwrap();
            let p = [10f64.powf(scale), -10f64.powf(scale), 0.5];
            prop_assert!(model.log_density(&p).is_finite());
        }
    }
}
