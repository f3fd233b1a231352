//! Reference values that do not touch the KDE estimators: closed-form
//! Gaussian divergences, exact divergences between histograms, and the
//! Stein divergence on SPD matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape(format!(
                "covariance {}×{} for mean of length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::NotSymmetric(asym));
        }
        spd_cholesky(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn univariate(mean: f64, variance: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance))
    }

    pub fn zero_mean(cov: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(cov.nrows()), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn spd_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))
}

fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let c = spd_cholesky(m)?;
    Ok(2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn same_dim(a: &GaussianParams, b: &GaussianParams) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("Gaussians of dimension {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Bhattacharyya distance `D_B = ⅛ Δμᵀ Σ̄⁻¹ Δμ + ½ ln(det Σ̄ / √(det Σ_a det Σ_b))`.
pub fn bhattacharyya_distance_gaussian(a: &GaussianParams, b: &GaussianParams) -> Result<f64> {
    same_dim(a, b)?;
    let avg = (&a.cov + &b.cov) * 0.5;
    let chol = spd_cholesky(&avg)?;
    let dm = &a.mean - &b.mean;
    let maha = dm.dot(&chol.solve(&dm));
    let ld_avg = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ld_a = log_det_spd(&a.cov)?;
    let ld_b = log_det_spd(&b.cov)?;
    Ok(maha / 8.0 + 0.5 * (ld_avg - 0.5 * (ld_a + ld_b)))
}

/// `B(a, b) = ∫ √(a·b) = exp(−D_B)`.
pub fn bhattacharyya_coefficient_gaussian(a: &GaussianParams, b: &GaussianParams) -> Result<f64> {
    Ok((-bhattacharyya_distance_gaussian(a, b)?).exp())
}

/// `δ_H² = 2 − 2B`.
pub fn hellinger_gaussian_closed_form(a: &GaussianParams, b: &GaussianParams) -> Result<f64> {
    Ok(2.0 - 2.0 * bhattacharyya_coefficient_gaussian(a, b)?)
}

/// `KL(p‖q) = ½[tr(Σ_q⁻¹Σ_p) + Δμᵀ Σ_q⁻¹ Δμ − D + ln(det Σ_q / det Σ_p)]`.
pub fn kl_gaussian(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    same_dim(p, q)?;
    let cq = spd_cholesky(&q.cov)?;
    let tr = cq.solve(&p.cov).trace();
    let dm = &q.mean - &p.mean;
    let maha = dm.dot(&cq.solve(&dm));
    let ld_q = 2.0 * cq.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ld_p = log_det_spd(&p.cov)?;
    Ok(0.5 * (tr + maha - p.dim() as f64 + ld_q - ld_p))
}

/// Jeffrey divergence `KL(a‖b) + KL(b‖a)`.
pub fn jeffrey_gaussian_closed_form(a: &GaussianParams, b: &GaussianParams) -> Result<f64> {
    Ok(kl_gaussian(a, b)? + kl_gaussian(b, a)?)
}

/// `S(A, B) = ln det((A+B)/2) − ½ ln det(AB)`.
pub fn stein_divergence(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(Error::Shape(format!(
            "Stein divergence needs equal square matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let avg = (a + b) * 0.5;
    Ok(log_det_spd(&avg)? - 0.5 * (log_det_spd(a)? + log_det_spd(b)?))
}

/// Discrete probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    probs: Vec<f64>,
}

impl Histogram {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty histogram".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument("histogram entries must be ≥ 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("histogram sums to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights to a histogram.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidArgument("weights sum to zero".into()));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    fn smoothed(&self) -> Vec<f64> {
        let raw: Vec<f64> = self.probs.iter().map(|p| p + HISTOGRAM_SMOOTHING).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / s).collect()
    }
}

/// Added to every bin before the discrete Jeffrey divergence.
pub const HISTOGRAM_SMOOTHING: f64 = 1e-12;

fn same_len(a: &Histogram, b: &Histogram) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("histograms of length {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// `Σ_k (√h1_k − √h2_k)²`.
pub fn hellinger_discrete_exact(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    same_len(h1, h2)?;
    Ok(h1.probs.iter().zip(&h2.probs).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum())
}

/// `Σ_k (h1_k − h2_k) ln(h1_k / h2_k)`. Histograms with empty bins are
/// smoothed by [`HISTOGRAM_SMOOTHING`] and renormalized first.
pub fn jeffrey_discrete_exact(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    same_len(h1, h2)?;
    let needs_smoothing = h1.probs.iter().chain(&h2.probs).any(|p| *p == 0.0);
    let (a, b) = if needs_smoothing { (h1.smoothed(), h2.smoothed()) } else { (h1.probs.clone(), h2.probs.clone()) };
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q) * (p / q).ln()).sum())
}
