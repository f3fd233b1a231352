//! Self-checks against closed-form oracles, definiteness properties,
//! gradient consistency and end-to-end behaviour.
//!
//! Each check returns a [`CheckOutcome`]; the trial counts are parameters so
//! the same code serves a fast smoke run and the full acceptance run.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, FeatureSet, SyntheticSpec};
use crate::density::{BandwidthPolicy, KdeOptions};
use crate::dimred::{
    affinity_from_divergences, compactness_ratio, frozen_bandwidths, learn_projection, random_init, DrConfig, DrProblem,
};
use crate::divergence::{divergence_matrix, empirical, symmetric_estimate, DivergenceKind, PreparedSet};
use crate::error::Result;
use crate::experiment::{run_experiment, DataSource, ExperimentConfig, Pipeline, SigmaChoice};
use crate::kernels::{gram_from_divergences, min_eigenvalue, KernelFamily, KernelSpec, SIGMA_GRID};
use crate::manifold::{tangent_project, CgTrace, StiefelPoint};
use crate::oracles::{
    bhattacharyya_distance_gaussian, hellinger_discrete_exact, hellinger_gaussian_closed_form,
    jeffrey_gaussian_closed_form, stein_divergence, GaussianParams, Histogram,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {} ({:.2} s)", self.name, self.detail, self.seconds)
    }
}

fn outcome(name: &str, start: Instant, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.to_string(), passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn random_set(id: &str, label: usize, n: usize, dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> FeatureSet {
    let scale = 0.5 + rng.random::<f64>();
    let m = DMatrix::from_fn(n, dim, |_, _| shift + scale * normal(rng));
    FeatureSet::new(id, label, m).expect("finite samples")
}

/// Median signed relative errors of the two estimators on 1-D
/// `N(0,1)` vs `N(1,1)` samples, one entry per seed.
pub fn estimator_oracle_errors(n: usize, seeds: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let p0 = GaussianParams::univariate(0.0, 1.0)?;
    let p1 = GaussianParams::univariate(1.0, 1.0)?;
    let h_true = hellinger_gaussian_closed_form(&p0, &p1)?;
    let j_true = jeffrey_gaussian_closed_form(&p0, &p1)?;
    let opts = KdeOptions::default();
    let mut h = Vec::new();
    let mut j = Vec::new();
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = FeatureSet::new("p", 0, DMatrix::from_fn(n, 1, |_, _| normal(&mut rng)))?;
        let b = FeatureSet::new("q", 1, DMatrix::from_fn(n, 1, |_, _| 1.0 + normal(&mut rng)))?;
        let pa = PreparedSet::fit(&a, &opts)?;
        let pb = PreparedSet::fit(&b, &opts)?;
        h.push(symmetric_estimate(DivergenceKind::HellingerSquared, &pa, &pb) / h_true - 1.0);
        j.push(symmetric_estimate(DivergenceKind::Jeffrey, &pa, &pb) / j_true - 1.0);
    }
    Ok((h, j))
}

/// Empirical δ_H² and δ_J against their Gaussian closed forms.
pub fn estimator_oracle_agreement(n: usize, seeds: usize) -> Result<CheckOutcome> {
    let start = Instant::now();
    let (h, j) = estimator_oracle_errors(n, seeds)?;
    let (mh, mj) = (median(h), median(j));
    let passed = mh.abs() <= 0.05 && mj.abs() <= 0.10;
    Ok(outcome(
        "estimator vs oracle",
        start,
        passed,
        format!(
            "median rel. error δ_H² {:+.2}% (≤ 5%), δ_J {:+.2}% (≤ 10%), n = {n}, {seeds} seeds",
            100.0 * mh,
            100.0 * mj
        ),
    ))
}

/// `δ(P,Q) = δ(Q,P)` and `δ(P,P) = 0` on random sets.
pub fn symmetry_identity(pairs: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = KdeOptions::default();
    let mut worst_asym = 0.0f64;
    let mut worst_self = 0.0f64;
    for _ in 0..pairs {
        let dim = rng.random_range(1..=4);
        let p = random_set("p", 0, rng.random_range(5..=30), dim, 0.0, &mut rng);
        let shift = 2.0 * normal(&mut rng);
        let q = random_set("q", 1, rng.random_range(5..=30), dim, shift, &mut rng);
        for kind in [DivergenceKind::HellingerSquared, DivergenceKind::Jeffrey] {
            worst_asym = worst_asym.max((empirical(kind, &p, &q, &opts)? - empirical(kind, &q, &p, &opts)?).abs());
            worst_self = worst_self.max(empirical(kind, &p, &p, &opts)?.abs());
        }
    }
    Ok(outcome(
        "symmetry and identity",
        start,
        worst_asym <= 1e-12 && worst_self == 0.0,
        format!("max |δ(P,Q) − δ(Q,P)| = {worst_asym:e} (≤ 1e-12), max |δ(P,P)| = {worst_self:e} (= 0), {pairs} pairs"),
    ))
}

fn random_histogram(k: usize, rng: &mut ChaCha8Rng) -> Histogram {
    let w: Vec<f64> = (0..k).map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() }).collect();
    let w = if w.iter().all(|&v| v == 0.0) { vec![1.0; k] } else { w };
    Histogram::from_weights(&w).expect("positive mass")
}

fn exact_hellinger_matrix(hists: &[Histogram]) -> Result<DMatrix<f64>> {
    let m = hists.len();
    let mut d = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let v = hellinger_discrete_exact(&hists[i], &hists[j])?;
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// `Σ c_i c_j δ_H²(p_i, p_j) ≤ 0` for zero-sum `c` on exact histograms.
pub fn hellinger_negative_definite(collections: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..collections {
        let n = rng.random_range(2..=8);
        let k = rng.random_range(2..=16);
        let hists: Vec<Histogram> = (0..n).map(|_| random_histogram(k, &mut rng)).collect();
        let d = exact_hellinger_matrix(&hists)?;
        let mut c = DVector::from_fn(n, |_, _| normal(&mut rng));
        c.add_scalar_mut(-c.mean());
        worst = worst.max((c.transpose() * &d * &c)[(0, 0)]);
    }
    Ok(outcome(
        "negative definiteness",
        start,
        worst <= 1e-10,
        format!("max quadratic form {worst:e} (≤ 1e-10), {collections} collections"),
    ))
}

/// Minimum eigenvalues of Hellinger Gaussian and Laplace Grams, over exact
/// histogram distances and over empirical set estimates.
pub fn kernel_psd(grams: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 12;
    let opts = KdeOptions::default();
    let mut worst_exact = [f64::INFINITY; 2];
    let mut worst_emp = [f64::INFINITY; 2];
    for _ in 0..grams {
        let k = rng.random_range(2..=16);
        let hists: Vec<Histogram> = (0..m).map(|_| random_histogram(k, &mut rng)).collect();
        let exact = exact_hellinger_matrix(&hists)?;

        let dim = rng.random_range(1..=3);
        let sets: Vec<FeatureSet> = (0..m)
            .map(|i| {
                let n = rng.random_range(8..=20);
                let shift = 1.5 * normal(&mut rng);
                random_set(&format!("s{i}"), 0, n, dim, shift, &mut rng)
            })
            .collect();
        let emp = divergence_matrix(&sets, DivergenceKind::HellingerSquared, &opts)?.values;

        for (f, family) in [KernelFamily::HellingerGaussian, KernelFamily::HellingerLaplace].into_iter().enumerate() {
            let sigma = SIGMA_GRID[rng.random_range(0..SIGMA_GRID.len())];
            let spec = KernelSpec::new(family, sigma);
            worst_exact[f] = worst_exact[f].min(min_eigenvalue(&gram_from_divergences(&exact, &spec)?)?);
            worst_emp[f] = worst_emp[f].min(min_eigenvalue(&gram_from_divergences(&emp, &spec)?)?);
        }
    }
    let passed = worst_exact.iter().all(|&v| v >= -1e-10) && worst_emp.iter().all(|&v| v >= -1e-6);
    Ok(outcome(
        "kernel positive definiteness",
        start,
        passed,
        format!(
            "min eigenvalue exact HG {:e} / HL {:e} (≥ −1e-10), empirical HG {:e} / HL {:e} (≥ −1e-6), {grams} Grams per family, m = {m}",
            worst_exact[0], worst_exact[1], worst_emp[0], worst_emp[1]
        ),
    ))
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = gaussian_matrix(d, d, rng);
    &a * a.transpose() + DMatrix::identity(d, d) * (0.05 + rng.random::<f64>())
}

/// Bhattacharyya distance of zero-mean Gaussians against half the Stein divergence.
pub fn stein_identity(pairs: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let d = rng.random_range(1..=6);
        let a = random_spd(d, &mut rng);
        let b = random_spd(d, &mut rng);
        let db = bhattacharyya_distance_gaussian(
            &GaussianParams::zero_mean(a.clone())?,
            &GaussianParams::zero_mean(b.clone())?,
        )?;
        worst = worst.max((db - 0.5 * stein_divergence(&a, &b)?).abs());
    }
    Ok(outcome(
        "Bhattacharyya–Stein identity",
        start,
        worst <= 1e-10,
        format!("max deviation {worst:e} (≤ 1e-10), {pairs} SPD pairs"),
    ))
}

/// Four labelled sets of six samples in R⁴ with a random start point.
fn dr_instance(seed: u64) -> Result<(Vec<FeatureSet>, StiefelPoint)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = DVector::from_fn(4, |_, _| normal(&mut rng)).normalize();
    let sets = (0..4)
        .map(|k| {
            let label = k / 2;
            let m = DMatrix::from_fn(6, 4, |_, c| normal(&mut rng) + 1.5 * label as f64 * dir[c]);
            FeatureSet::new(format!("s{k}"), label, m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sets, random_init(4, 2, seed ^ 0x5eed)?))
}

fn dr_problem<'a>(
    sets: &'a [FeatureSet],
    affinity: &'a crate::dimred::AffinityMatrix,
    kind: DivergenceKind,
    w: &StiefelPoint,
) -> Result<DrProblem<'a>> {
    let bw = frozen_bandwidths(sets, w, &BandwidthPolicy::PerSetIsotropic)?;
    DrProblem::new(sets, affinity, kind, bw, false)
}

fn instance_affinity(sets: &[FeatureSet], kind: DivergenceKind) -> Result<crate::dimred::AffinityMatrix> {
    let div = divergence_matrix(sets, kind, &KdeOptions::default())?.values;
    let labels: Vec<usize> = sets.iter().map(|s| s.label).collect();
    affinity_from_divergences(&div, &labels, None, 1)
}

/// Analytic cost gradient against central differences of the cost.
pub fn gradient_agreement(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for t in 0..instances as u64 {
        let (sets, w) = dr_instance(seed + t)?;
        for kind in [DivergenceKind::HellingerSquared, DivergenceKind::Jeffrey] {
            let aff = instance_affinity(&sets, kind)?;
            let prob = dr_problem(&sets, &aff, kind, &w)?;
            let g = prob.gradient_at(w.matrix())?;
            let mut fd = DMatrix::zeros(4, 2);
            for r in 0..4 {
                for c in 0..2 {
                    let mut wp = w.matrix().clone();
                    let mut wm = w.matrix().clone();
                    wp[(r, c)] += h;
                    wm[(r, c)] -= h;
                    fd[(r, c)] = (prob.cost_at(&wp)? - prob.cost_at(&wm)?) / (2.0 * h);
                }
            }
            let rel = (&g - &fd).norm() / fd.norm().max(1e-300);
            let g_t = tangent_project(&w, &g)?;
            let fd_t = tangent_project(&w, &fd)?;
            let rel_t = (&g_t - &fd_t).norm() / fd_t.norm().max(1e-300);
            worst = worst.max(rel).max(rel_t);
        }
    }
    Ok(outcome(
        "cost gradient vs finite differences",
        start,
        worst <= 1e-3,
        format!("max relative error {worst:e} (≤ 1e-3), {instances} instances × 2 divergences"),
    ))
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    Ok(StiefelPoint::orthonormalize(&gaussian_matrix(d, d, rng))?.into_matrix())
}

/// `cost(W) = cost(WR)` for random orthogonal `R`.
pub fn basis_invariance(rotations: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..rotations as u64 {
        let (sets, w) = dr_instance(seed + 1000 + t)?;
        for kind in [DivergenceKind::HellingerSquared, DivergenceKind::Jeffrey] {
            let aff = instance_affinity(&sets, kind)?;
            let prob = dr_problem(&sets, &aff, kind, &w)?;
            let r = random_orthogonal(2, &mut rng)?;
            worst = worst.max((prob.cost_at(w.matrix())? - prob.cost_at(&(w.matrix() * r))?).abs());
        }
    }
    Ok(outcome(
        "basis invariance",
        start,
        worst <= 1e-8,
        format!("max |L(W) − L(WR)| = {worst:e} (≤ 1e-8), {rotations} rotations × 2 divergences"),
    ))
}

/// The synthetic dimensionality-reduction benchmark: 3 classes × 4 sets in R²⁰.
pub fn dr_benchmark_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 3,
        sets_per_class: 4,
        samples_per_set: 20,
        dim: 20,
        class_separation: 3.0,
        within_class_jitter: 0.5,
        seed,
    }
}

#[derive(Debug, Clone)]
pub struct DrBenchmarkRun {
    pub seed: u64,
    pub trace: CgTrace,
    pub ratio_before: f64,
    pub ratio_after: f64,
}

impl DrBenchmarkRun {
    /// True when some step within the first 50 changed the cost by less
    /// than one part in 10⁴, or the gradient vanished first.
    pub fn settled_within(&self, iters: usize, rel_tol: f64) -> bool {
        if self.trace.iterations() == 0 {
            return true;
        }
        self.trace
            .rows
            .windows(2)
            .take(iters)
            .any(|w| (w[0].cost - w[1].cost).abs() / w[0].cost.abs().max(f64::MIN_POSITIVE) < rel_tol)
            || (self.trace.iterations() < iters && self.trace.stop == crate::manifold::StopReason::GradientTolerance)
    }
}

/// Learns `W` (d = 3, Hellinger) on each benchmark draw and records the
/// within/between divergence ratio before and after projecting.
pub fn run_dr_benchmark(seeds: usize) -> Result<Vec<DrBenchmarkRun>> {
    let opts = KdeOptions::default();
    let kind = DivergenceKind::HellingerSquared;
    (0..seeds as u64)
        .map(|seed| {
            let ds = generate_synthetic(&dr_benchmark_spec(seed))?;
            let cfg = DrConfig { target_dim: 3, divergence: kind, seed, ..Default::default() };
            let out = learn_projection(&ds.sets, &cfg)?;
            let labels = ds.labels();
            let before = compactness_ratio(&divergence_matrix(&ds.sets, kind, &opts)?.values, &labels)?;
            let projected: Vec<FeatureSet> = ds.sets.iter().map(|s| s.project(out.projection.matrix())).collect();
            let after = compactness_ratio(&divergence_matrix(&projected, kind, &opts)?.values, &labels)?;
            Ok(DrBenchmarkRun { seed, trace: out.trace, ratio_before: before, ratio_after: after })
        })
        .collect()
}

pub fn optimizer_behaviour(runs: &[DrBenchmarkRun], start: Instant) -> CheckOutcome {
    let good = runs.iter().filter(|r| r.trace.is_non_increasing() && r.settled_within(50, 1e-4)).count();
    let iters: Vec<String> = runs.iter().map(|r| r.trace.iterations().to_string()).collect();
    let need = (runs.len() * 9).div_ceil(10);
    outcome(
        "optimizer convergence",
        start,
        good >= need,
        format!(
            "{good}/{} runs monotone and settled within 50 iterations (need {need}); iterations [{}]",
            runs.len(),
            iters.join(", ")
        ),
    )
}

pub fn compactness(runs: &[DrBenchmarkRun], start: Instant) -> CheckOutcome {
    let good = runs.iter().filter(|r| r.ratio_after < r.ratio_before).count();
    let worst = runs.iter().map(|r| r.ratio_after / r.ratio_before).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        "classes more compact after projection",
        start,
        good == runs.len(),
        format!("{good}/{} runs improved the within/between ratio; worst after/before {worst:.3}", runs.len()),
    )
}

/// The separable classification benchmark (sep = 10, jitter = 0.3).
pub fn classification_config(
    pipeline: Pipeline,
    divergence: DivergenceKind,
    kernel: Option<KernelFamily>,
    reps: usize,
) -> ExperimentConfig {
    ExperimentConfig {
        pipeline,
        divergence,
        kernel,
        sigma: SigmaChoice::default(),
        repetitions: reps,
        per_class_gallery: 3,
        seed: 2024,
        ..ExperimentConfig::new(DataSource::Synthetic(SyntheticSpec {
            classes: 3,
            sets_per_class: 8,
            samples_per_set: 50,
            dim: 5,
            class_separation: 10.0,
            within_class_jitter: 0.3,
            seed: 7,
        }))
    }
}

/// NN and kFDA accuracies on the separable benchmark.
pub fn classification_benchmark(reps: usize) -> Result<CheckOutcome> {
    let start = Instant::now();
    let h = DivergenceKind::HellingerSquared;
    let j = DivergenceKind::Jeffrey;
    let acc = |p, d, k| run_experiment(&classification_config(p, d, k, reps)).map(|r| r.mean_accuracy);
    let nn_h = acc(Pipeline::Nn, h, None)?;
    let nn_j = acc(Pipeline::Nn, j, None)?;
    let hg = acc(Pipeline::Kfda, h, Some(KernelFamily::HellingerGaussian))?;
    let hl = acc(Pipeline::Kfda, h, Some(KernelFamily::HellingerLaplace))?;
    let kj = acc(Pipeline::Kfda, j, Some(KernelFamily::JeffreyExponential))?;
    let passed = nn_h >= 0.95 && nn_j >= 0.95 && hg >= nn_h - 0.02 && hl >= nn_h - 0.02 && kj >= nn_j - 0.02;
    Ok(outcome(
        "separable benchmark accuracy",
        start,
        passed,
        format!("NN-H {nn_h:.3}, NN-J {nn_j:.3} (≥ 0.95); kFDA-HG {hg:.3}, kFDA-HL {hl:.3} (≥ NN-H − 0.02), kFDA-J {kj:.3} (≥ NN-J − 0.02); {reps} reps"),
    ))
}

/// Serialized reports from two independent runs in pools of different sizes.
pub fn determinism(config: &ExperimentConfig, threads: [usize; 2]) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut outputs = Vec::new();
    for n in threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
        let report = pool.install(|| run_experiment(config))?;
        outputs.push(serde_json::to_string_pretty(&report).expect("serializable report"));
    }
    let same = outputs[0] == outputs[1];
    Ok(outcome(
        "deterministic reports",
        start,
        same,
        format!(
            "{} report with {} and {} threads: {}",
            config.method_name(),
            threads[0],
            threads[1],
            if same { "identical" } else { "different" }
        ),
    ))
}

/// Trial counts for [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// A few seconds; used by the CLI by default.
    Quick,
    /// The full acceptance-sized run.
    Full,
}

/// Runs every check in order.
pub fn run_suite(scale: Scale) -> Result<Vec<CheckOutcome>> {
    let full = scale == Scale::Full;
    let pick = |q: usize, f: usize| if full { f } else { q };
    let mut out = vec![
        estimator_oracle_agreement(2000, pick(3, 20))?,
        symmetry_identity(pick(20, 100), 1)?,
        hellinger_negative_definite(pick(40, 200), 2)?,
        kernel_psd(pick(50, 500), 3)?,
        stein_identity(pick(20, 100), 4)?,
        gradient_agreement(pick(4, 20), 5)?,
        basis_invariance(pick(5, 20), 6)?,
    ];
    let start = Instant::now();
    let runs = run_dr_benchmark(pick(2, 10))?;
    out.push(optimizer_behaviour(&runs, start));
    out.push(compactness(&runs, start));
    out.push(classification_benchmark(pick(2, 5))?);
    let det = classification_config(
        Pipeline::Kfda,
        DivergenceKind::HellingerSquared,
        Some(KernelFamily::HellingerGaussian),
        2,
    );
    out.push(determinism(&det, [1, 4])?);
    Ok(out)
}
