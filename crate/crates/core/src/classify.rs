//! Nearest-neighbour matching and kernel Fisher discriminant analysis.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::kernels::KernelSpec;

/// Label of the closest gallery row for every probe column of a `g × q`
/// dissimilarity matrix. Exact ties go to the lowest gallery index.
pub fn nn_classify(dissimilarities: &DMatrix<f64>, gallery_labels: &[usize]) -> Result<Vec<usize>> {
    let (g, q) = dissimilarities.shape();
    if g == 0 {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if gallery_labels.len() != g {
        return Err(Error::Shape(format!("{g} gallery rows but {} labels", gallery_labels.len())));
    }
    (0..q)
        .map(|j| {
            let mut best = 0;
            for i in 0..g {
                let v = dissimilarities[(i, j)];
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite dissimilarity at ({i}, {j})")));
                }
                if v < dissimilarities[(best, j)] {
                    best = i;
                }
            }
            Ok(gallery_labels[best])
        })
        .collect()
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Pairwise Euclidean distances between the rows of `a` (`g × r`) and `b` (`q × r`).
pub fn euclidean_distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| (a.row(i) - b.row(j)).norm())
}

/// A fitted kernel Fisher discriminant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfdaModel {
    /// Dual directions α, `m × r`.
    #[serde(skip)]
    pub train_coefficients: DMatrix<f64>,
    /// Training coordinates `K̃ α`, `m × r`.
    #[serde(skip)]
    pub train_latent: DMatrix<f64>,
    pub latent_dim: usize,
    pub lambda: f64,
    pub labels: Vec<usize>,
    /// Generalized eigenvalues of the kept directions, descending.
    pub eigenvalues: Vec<f64>,
    /// Column means of the training Gram (centering statistics).
    pub gram_col_means: Vec<f64>,
    pub gram_grand_mean: f64,
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    #[serde(default)]
    pub gallery_ids: Vec<String>,
}

fn centering_stats(gram: &DMatrix<f64>) -> (Vec<f64>, f64) {
    let m = gram.nrows() as f64;
    let col: Vec<f64> = gram.column_iter().map(|c| c.sum() / m).collect();
    let grand = col.iter().sum::<f64>() / m;
    (col, grand)
}

/// `K̃[i,j] = K[i,j] − μ_i − ν_j + g`, with `μ` the training Gram column means,
/// `ν` the column means of `cross` and `g` the training grand mean.
fn center_cross(cross: &DMatrix<f64>, col_means: &[f64], grand: f64) -> DMatrix<f64> {
    let m = cross.nrows() as f64;
    let probe_means: Vec<f64> = cross.column_iter().map(|c| c.sum() / m).collect();
    DMatrix::from_fn(cross.nrows(), cross.ncols(), |i, j| cross[(i, j)] - col_means[i] - probe_means[j] + grand)
}

/// Solves `M α = ν (N + λI) α` on the double-centered Gram and keeps the
/// top `latent_dim` directions (default `C − 1`).
///
/// `M = Σ_c n_c m_c m_cᵀ` with `m_c` the class means of the centered Gram
/// columns, and `N = K̃ (I − L) K̃` the within-class scatter (`L` is the
/// block-diagonal class-averaging matrix). Directions are normalized so that
/// `αᵀ(N + λI)α = I` and signed so that each column's largest-magnitude
/// coefficient is positive.
pub fn kfda_fit(gram: &DMatrix<f64>, labels: &[usize], latent_dim: Option<usize>, lambda: f64) -> Result<KfdaModel> {
    let m = gram.nrows();
    if gram.ncols() != m {
        return Err(Error::Shape(format!("Gram is {}×{}", m, gram.ncols())));
    }
    if labels.len() != m {
        return Err(Error::Shape(format!("{m} training sets but {} labels", labels.len())));
    }
    let asym = (gram - gram.transpose()).amax();
    if asym > 1e-10 * gram.amax().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("λ must be > 0, got {lambda}")));
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("kFDA needs at least two classes".into()));
    }
    let r = latent_dim.unwrap_or(classes.len() - 1);
    if r < 1 || r > classes.len() - 1 {
        return Err(Error::InvalidArgument(format!("latent dimension {r} must lie in 1..={}", classes.len() - 1)));
    }

    let (col_means, grand) = centering_stats(gram);
    let kc = center_cross(gram, &col_means, grand);
    let kc = (&kc + kc.transpose()) * 0.5;

    // P = I − L projects out class means
    let mut within_proj = DMatrix::<f64>::identity(m, m);
    let mut between = DMatrix::<f64>::zeros(m, m);
    for &c in &classes {
        let members: Vec<usize> = (0..m).filter(|&i| labels[i] == c).collect();
        let nc = members.len() as f64;
        let mut mean = DVector::<f64>::zeros(m);
        for &i in &members {
            mean += kc.column(i);
        }
        mean /= nc;
        between += &mean * mean.transpose() * nc;
        for &i in &members {
            for &j in &members {
                within_proj[(i, j)] -= 1.0 / nc;
            }
        }
    }
    let a = &within_proj * &kc;
    let within = a.transpose() * &a;
    let reg = within + DMatrix::<f64>::identity(m, m) * lambda;

    let chol = Cholesky::new(reg).ok_or(Error::EigenFailure { lambda })?;
    let l = chol.l();
    let linv = l.clone().solve_lower_triangular(&DMatrix::identity(m, m)).ok_or(Error::EigenFailure { lambda })?;
    let whitened = &linv * &between * linv.transpose();
    let whitened = (&whitened + whitened.transpose()) * 0.5;
    let eig = SymmetricEigen::new(whitened);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure { lambda });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));

    let lt_inv = linv.transpose();
    let mut train_coefficients = DMatrix::zeros(m, r);
    for (k, &idx) in order[..r].iter().enumerate() {
        let mut alpha = &lt_inv * eig.eigenvectors.column(idx);
        let pivot =
            alpha.iter().copied().enumerate().fold(
                (0, 0.0f64),
                |best, (i, v)| {
                    if v.abs() > best.1.abs() {
                        (i, v)
                    } else {
                        best
                    }
                },
            );
        if alpha[pivot.0] < 0.0 {
            alpha = -alpha;
        }
        train_coefficients.set_column(k, &alpha);
    }
    let train_latent = &kc * &train_coefficients;
    if train_latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure { lambda });
    }
    Ok(KfdaModel {
        train_coefficients,
        train_latent,
        latent_dim: r,
        lambda,
        labels: labels.to_vec(),
        eigenvalues: order[..r].iter().map(|&i| eig.eigenvalues[i]).collect(),
        gram_col_means: col_means,
        gram_grand_mean: grand,
        kernel: None,
        gallery_ids: Vec::new(),
    })
}

/// Latent coordinates (`q × r`) of probes given their `m × q` cross-Gram with
/// the training sets; centering matches [`kfda_fit`].
pub fn kfda_project(model: &KfdaModel, cross: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cross.nrows() != model.train_coefficients.nrows() {
        return Err(Error::Shape(format!(
            "cross-Gram has {} rows, model was trained on {} sets",
            cross.nrows(),
            model.train_coefficients.nrows()
        )));
    }
    let kc = center_cross(cross, &model.gram_col_means, model.gram_grand_mean);
    Ok(kc.transpose() * &model.train_coefficients)
}

impl KfdaModel {
    /// Nearest training set in latent space for each probe column of `cross`.
    pub fn classify(&self, cross: &DMatrix<f64>) -> Result<Vec<usize>> {
        let latent = kfda_project(self, cross)?;
        nn_classify(&euclidean_distances(&self.train_latent, &latent), &self.labels)
    }

    /// Writes `model.json`, `coefficients.csv` and `train_latent.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join("model.json"), self)?;
        io::write_csv_matrix(&dir.join("coefficients.csv"), &self.train_coefficients)?;
        io::write_csv_matrix(&dir.join("train_latent.csv"), &self.train_latent)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut model: KfdaModel = io::read_json(&dir.join("model.json"))?;
        model.train_coefficients = io::read_csv_matrix(&dir.join("coefficients.csv"))?;
        model.train_latent = io::read_csv_matrix(&dir.join("train_latent.csv"))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::min_eigenvalue;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// RBF Gram on random points clustered by label.
    fn clustered_gram(labels: &[usize], spread: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = labels
            .iter()
            .map(|&l| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [l as f64 * 3.0 + spread * a, (l % 2) as f64 * 2.0 + spread * b]
            })
            .collect();
        DMatrix::from_fn(labels.len(), labels.len(), |i, j| {
            let d = (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2);
            (-0.5 * d).exp()
        })
    }

    #[test]
    fn nn_picks_zero_column_and_breaks_ties_low() {
        let d = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 0.0, 1.0, 0.7, 0.3]);
        assert_eq!(nn_classify(&d, &[4, 5, 6]).unwrap(), vec![5, 6]);
        let tie = DMatrix::from_row_slice(2, 1, &[0.2, 0.2]);
        assert_eq!(nn_classify(&tie, &[1, 0]).unwrap(), vec![1]);
        assert!(nn_classify(&DMatrix::zeros(0, 2), &[]).is_err());
    }

    #[test]
    fn nn_invariant_to_increasing_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DMatrix::from_fn(7, 5, |_, _| rand::Rng::random::<f64>(&mut rng));
        let labels = [0, 1, 2, 0, 1, 2, 0];
        let a = nn_classify(&d, &labels).unwrap();
        let b = nn_classify(&d.map(|v| (3.0 * v).exp() + v.powi(3)), &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn accuracy_values() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 1, 0], &[1, 1, 1, 1]).unwrap(), 0.5);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn block_gram_separates_two_classes() {
        let labels = [0, 0, 0, 1, 1, 1];
        let gram = DMatrix::from_fn(6, 6, |i, j| if labels[i] == labels[j] { 1.0 } else { 0.0 });
        let model = kfda_fit(&gram, &labels, None, 1e-4).unwrap();
        assert_eq!(model.latent_dim, 1);
        let z = model.train_latent.column(0);
        let (a, b): (Vec<f64>, Vec<f64>) = ((0..3).map(|i| z[i]).collect(), (3..6).map(|i| z[i]).collect());
        let margin = if a[0] < b[0] {
            b.iter().cloned().fold(f64::INFINITY, f64::min) - a.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            a.iter().cloned().fold(f64::INFINITY, f64::min) - b.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        };
        assert!(margin > 0.0, "{z}");
    }

    #[test]
    fn normalization_and_projection_consistency() {
        let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2, 2];
        let gram = clustered_gram(&labels, 0.8, 2);
        let model = kfda_fit(&gram, &labels, None, 1e-3).unwrap();
        assert_eq!(model.latent_dim, 2);
        let again = kfda_project(&model, &gram).unwrap();
        assert!((&again - &model.train_latent).amax() < 1e-10);

        // probe equal to training set 4, duplicated
        let mut cross = DMatrix::zeros(10, 2);
        cross.set_column(0, &gram.column(4));
        cross.set_column(1, &gram.column(4));
        let z = kfda_project(&model, &cross).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert!((z.row(0) - model.train_latent.row(4)).amax() < 1e-8);
    }

    #[test]
    fn sign_convention_makes_pivot_positive() {
        let labels = [0, 1, 2, 0, 1, 2];
        let model = kfda_fit(&clustered_gram(&labels, 0.5, 3), &labels, None, 1e-3).unwrap();
        for col in model.train_coefficients.column_iter() {
            let pivot = col.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn relabeling_permutes_nothing_but_signs() {
        let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2];
        let gram = clustered_gram(&labels, 0.7, 4);
        let relabeled: Vec<usize> = labels.iter().map(|&l| [2, 0, 1][l]).collect();
        let a = kfda_fit(&gram, &labels, None, 1e-3).unwrap();
        let b = kfda_fit(&gram, &relabeled, None, 1e-3).unwrap();
        for k in 0..a.latent_dim {
            let ca = a.train_coefficients.column(k);
            let cb = b.train_coefficients.column(k);
            let same = (ca - cb).amax();
            let flipped = (ca + cb).amax();
            assert!(same.min(flipped) < 1e-8 * ca.amax().max(1.0), "{same} {flipped}");
        }
    }

    #[test]
    fn lambda_sweep_on_indefinite_gram_stays_finite() {
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let mut gram = clustered_gram(&labels, 1.0, 5);
        // perturb into a slightly indefinite matrix
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..9 {
            for j in i + 1..9 {
                let e: f64 = StandardNormal.sample(&mut rng);
                gram[(i, j)] += 0.15 * e;
                gram[(j, i)] = gram[(i, j)];
            }
        }
        assert!(min_eigenvalue(&gram).unwrap() < 0.0);
        for lambda in [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1] {
            let model = kfda_fit(&gram, &labels, None, lambda).unwrap();
            assert!(model.train_latent.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        // probes drawn from the same clusters as the training sets
        let train_labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let probe_labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let all: Vec<usize> = train_labels.iter().chain(&probe_labels).copied().collect();
        let full = clustered_gram(&all, 0.6, 7);
        let gram = full.view((0, 0), (30, 30)).into_owned();
        let cross = full.view((0, 30), (30, 30)).into_owned();

        let model = kfda_fit(&gram, &train_labels, None, 1e-3).unwrap();
        let acc = accuracy(&model.classify(&cross).unwrap(), &probe_labels).unwrap();
        assert!(acc > 0.9, "{acc}");

        let mut total = 0.0;
        let trials = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..trials {
            let mut shuffled = train_labels.clone();
            shuffled.shuffle(&mut rng);
            let model = kfda_fit(&gram, &shuffled, None, 1e-3).unwrap();
            total += accuracy(&model.classify(&cross).unwrap(), &probe_labels).unwrap();
        }
        let mean = total / trials as f64;
        // 600 Bernoulli(1/3) trials: 3σ ≈ 0.058
        assert!((mean - 1.0 / 3.0).abs() < 0.06, "{mean}");
    }

    #[test]
    fn rejects_bad_arguments() {
        let gram = DMatrix::identity(4, 4);
        assert!(kfda_fit(&gram, &[0, 0, 1, 1], Some(2), 1e-4).is_err());
        assert!(kfda_fit(&gram, &[0, 0, 0, 0], None, 1e-4).is_err());
        assert!(kfda_fit(&gram, &[0, 0, 1, 1], None, 0.0).is_err());
        let model = kfda_fit(&gram, &[0, 0, 1, 1], None, 1e-4).unwrap();
        assert!(kfda_project(&model, &DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let labels = [0, 1, 0, 1, 2, 2];
        let model = kfda_fit(&clustered_gram(&labels, 0.5, 9), &labels, None, 1e-3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        assert_eq!(KfdaModel::load(dir.path()).unwrap(), model);
    }
}
