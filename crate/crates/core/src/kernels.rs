//! Gram matrices for kernels on the statistical manifold and for the
//! subspace / covariance baselines.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSet;
use crate::density::KdeOptions;
use crate::divergence::{divergence_matrix, DivergenceKind};
use crate::error::{Error, Result};
use crate::io;

/// The seven bandwidths searched for σ.
pub const SIGMA_GRID: [f64; 7] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `exp(−σ δ_H²)`
    #[serde(alias = "hg")]
    HellingerGaussian,
    /// `exp(−σ δ_H)`
    #[serde(alias = "hl")]
    HellingerLaplace,
    /// `exp(−σ δ_J)`
    #[serde(alias = "j")]
    JeffreyExponential,
    /// `‖AᵀB‖_F²` on per-set orthonormal bases.
    #[serde(alias = "gda")]
    GrassmannProjection,
    /// `Tr(log(A) log(B))` on regularized per-set covariances.
    #[serde(alias = "cdl")]
    SpdLogEuclidean,
}

impl KernelFamily {
    /// Divergence feeding this kernel, or `None` for the two baselines.
    pub fn divergence(self) -> Option<DivergenceKind> {
        match self {
            KernelFamily::HellingerGaussian | KernelFamily::HellingerLaplace => Some(DivergenceKind::HellingerSquared),
            KernelFamily::JeffreyExponential => Some(DivergenceKind::Jeffrey),
            KernelFamily::GrassmannProjection | KernelFamily::SpdLogEuclidean => None,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            KernelFamily::HellingerGaussian => "hg",
            KernelFamily::HellingerLaplace => "hl",
            KernelFamily::JeffreyExponential => "j",
            KernelFamily::GrassmannProjection => "gda",
            KernelFamily::SpdLogEuclidean => "cdl",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hg" | "hellinger_gaussian" => Ok(KernelFamily::HellingerGaussian),
            "hl" | "hellinger_laplace" => Ok(KernelFamily::HellingerLaplace),
            "j" | "jeffrey_exponential" => Ok(KernelFamily::JeffreyExponential),
            "gda" | "grassmann_projection" => Ok(KernelFamily::GrassmannProjection),
            "cdl" | "spd_log_euclidean" => Ok(KernelFamily::SpdLogEuclidean),
            other => Err(Error::InvalidArgument(format!("unknown kernel {other:?}"))),
        }
    }
}

fn default_sigma() -> f64 {
    0.1
}

fn default_subspace_dim() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Ignored by the two baselines.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Basis size for [`KernelFamily::GrassmannProjection`].
    #[serde(default = "default_subspace_dim")]
    pub subspace_dim: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, sigma: f64) -> Self {
        Self { family, sigma, subspace_dim: default_subspace_dim() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("kernel.sigma", "must be > 0"));
        }
        if self.subspace_dim < 1 {
            return Err(Error::config("kernel.subspace_dim", "must be ≥ 1"));
        }
        Ok(())
    }
}

/// Maps one divergence value through a divergence-based kernel.
///
/// For the Hellinger families `delta` is `δ_H² ∈ [0, 2]`; the Laplace kernel
/// uses its square root.
pub fn kernel_from_divergence(delta: f64, spec: &KernelSpec) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative divergence {delta}")));
    }
    let hellinger_range = |d: f64| {
        if d > 2.0 + 1e-10 {
            Err(Error::InvalidArgument(format!("squared Hellinger distance {d} outside [0, 2]")))
        } else {
            Ok(d)
        }
    };
    match spec.family {
        KernelFamily::HellingerGaussian => Ok((-spec.sigma * hellinger_range(delta)?).exp()),
        KernelFamily::HellingerLaplace => Ok((-spec.sigma * hellinger_range(delta)?.sqrt()).exp()),
        KernelFamily::JeffreyExponential => Ok((-spec.sigma * delta).exp()),
        KernelFamily::GrassmannProjection | KernelFamily::SpdLogEuclidean => {
            Err(Error::InvalidArgument(format!("{:?} is not a divergence kernel", spec.family)))
        }
    }
}

/// Entrywise kernel map of a divergence matrix (any shape).
pub fn gram_from_divergences(div: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(div.nrows(), div.ncols());
    for j in 0..div.ncols() {
        for i in 0..div.nrows() {
            out[(i, j)] = kernel_from_divergence(div[(i, j)], spec)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    #[serde(skip)]
    pub values: DMatrix<f64>,
    pub spec: KernelSpec,
    pub ids: Vec<String>,
}

impl GramMatrix {
    /// CSV of values plus a `.json` sidecar with the kernel spec and set ids.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        io::write_csv_matrix(csv_path, &self.values)?;
        io::write_json(&csv_path.with_extension("json"), self)
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let mut meta: GramMatrix = io::read_json(&csv_path.with_extension("json"))?;
        meta.values = io::read_csv_matrix(csv_path)?;
        Ok(meta)
    }
}

/// Builds the `m × m` Gram matrix of `sets` under `spec`.
pub fn gram(sets: &[FeatureSet], spec: &KernelSpec, opts: &KdeOptions) -> Result<GramMatrix> {
    spec.validate()?;
    if sets.is_empty() {
        return Err(Error::InvalidArgument("no sets given".into()));
    }
    let values = match spec.family.divergence() {
        Some(kind) => gram_from_divergences(&divergence_matrix(sets, kind, opts)?.values, spec)?,
        None => {
            let reps = baseline_representations(sets, spec)?;
            baseline_gram(&reps, &reps, spec)
        }
    };
    Ok(GramMatrix { values, spec: *spec, ids: sets.iter().map(|s| s.id.clone()).collect() })
}

/// Per-set matrices consumed by the baseline kernels: orthonormal bases for
/// the projection kernel, matrix logarithms of covariances for log-Euclidean.
pub fn baseline_representations(sets: &[FeatureSet], spec: &KernelSpec) -> Result<Vec<DMatrix<f64>>> {
    sets.par_iter()
        .map(|s| match spec.family {
            KernelFamily::GrassmannProjection => set_to_subspace(s, spec.subspace_dim),
            KernelFamily::SpdLogEuclidean => spd_log(&set_to_covariance(s, None)?),
            other => Err(Error::InvalidArgument(format!("{other:?} is not a baseline kernel"))),
        })
        .collect()
}

/// Kernel values between two lists of baseline representations.
pub fn baseline_gram(a: &[DMatrix<f64>], b: &[DMatrix<f64>], spec: &KernelSpec) -> DMatrix<f64> {
    let cells: Vec<(usize, usize)> = (0..a.len()).flat_map(|i| (0..b.len()).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| match spec.family {
            KernelFamily::GrassmannProjection => (a[i].transpose() * &b[j]).norm_squared(),
            // both logs are symmetric, so Tr(log(A)ᵀ log(B)) is the Frobenius inner product
            _ => a[i].dot(&b[j]),
        })
        .collect();
    DMatrix::from_row_iterator(a.len(), b.len(), vals)
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!("{}×{} matrix is not square", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * m.amax().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym).eigenvalues.min())
}

fn centered(set: &FeatureSet) -> DMatrix<f64> {
    let mean = set.features.row_mean();
    let mut x = set.features.clone();
    for mut r in x.row_iter_mut() {
        r -= &mean;
    }
    x
}

/// Top-`p` principal directions (left singular vectors of the centered
/// `D × n` data), as a `D × p` orthonormal matrix.
pub fn set_to_subspace(set: &FeatureSet, p: usize) -> Result<DMatrix<f64>> {
    let (n, d) = set.features.shape();
    if p < 1 || p > n.min(d) {
        return Err(Error::InvalidArgument(format!("subspace dimension {p} must lie in 1..={}", n.min(d))));
    }
    let svd = centered(set).transpose().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let cols: Vec<_> = order[..p].iter().map(|&k| u.column(k).into_owned()).collect();
    Ok(DMatrix::from_columns(&cols))
}

/// `(1/n) X_cᵀ X_c + ridge·I`; the default ridge is `1e-3 · tr/D` of the
/// sample covariance.
pub fn set_to_covariance(set: &FeatureSet, ridge: Option<f64>) -> Result<DMatrix<f64>> {
    let x = centered(set);
    let d = set.dim();
    let cov = x.transpose() * &x / set.len() as f64;
    let ridge = match ridge {
        Some(r) if r >= 0.0 => r,
        Some(r) => return Err(Error::InvalidArgument(format!("negative ridge {r}"))),
        None => {
            let mean_var = cov.trace() / d as f64;
            1e-3 * if mean_var > 0.0 { mean_var } else { 1.0 }
        }
    };
    Ok(cov + DMatrix::identity(d, d) * ridge)
}

/// Principal logarithm of an SPD matrix.
pub fn spd_log(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a)?;
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    if let Some(v) = eig.eigenvalues.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NotPositiveDefinite(format!("eigenvalue {v}")));
    }
    let logs = eig.eigenvalues.map(f64::ln);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&logs) * eig.eigenvectors.transpose())
}
