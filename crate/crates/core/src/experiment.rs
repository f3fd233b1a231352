//! Repeated gallery/probe experiments and their reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{accuracy, kfda_fit, nn_classify, KfdaModel};
use crate::dataset::{generate_synthetic, load_dataset, split_indices, Dataset, FeatureSet, SyntheticSpec};
use crate::density::KdeOptions;
use crate::dimred::{learn_projection, DrConfig};
use crate::divergence::{cross_divergences, divergence_matrix, DivergenceKind};
use crate::error::{Error, Result};
use crate::io;
use crate::kernels::{
    baseline_gram, baseline_representations, gram_from_divergences, KernelFamily, KernelSpec, SIGMA_GRID,
};
use crate::manifold::{StopReason, TraceRow};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "STATDIV_THREADS";

/// Sizes the global rayon pool from [`THREADS_ENV`] (all cores when unset).
/// Only the first call in a process has an effect.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::config(THREADS_ENV, format!("expected a positive integer, got {raw:?}")))?;
    if n == 0 {
        return Err(Error::config(THREADS_ENV, "must be ≥ 1"));
    }
    // an already-initialized pool is left as is
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Manifest { path: PathBuf },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    #[default]
    Nn,
    Kfda,
    NnDr,
}

impl std::str::FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "nn" => Ok(Pipeline::Nn),
            "kfda" => Ok(Pipeline::Kfda),
            "nn_dr" | "dr" => Ok(Pipeline::NnDr),
            other => Err(Error::InvalidArgument(format!("unknown pipeline {other:?}"))),
        }
    }
}

/// Either a fixed σ or a search over [`SIGMA_GRID`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaChoice {
    Fixed(f64),
    Search(GridTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridTag {
    Grid,
}

impl Default for SigmaChoice {
    fn default() -> Self {
        SigmaChoice::Search(GridTag::Grid)
    }
}

impl std::str::FromStr for SigmaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("grid") {
            return Ok(SigmaChoice::default());
        }
        s.parse::<f64>()
            .map(SigmaChoice::Fixed)
            .map_err(|_| Error::InvalidArgument(format!("σ must be a number or \"grid\", got {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KfdaOptions {
    pub lambda: f64,
    /// `None` keeps `C − 1` directions.
    pub latent_dim: Option<usize>,
}

impl Default for KfdaOptions {
    fn default() -> Self {
        Self { lambda: 1e-4, latent_dim: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default = "default_divergence")]
    pub divergence: DivergenceKind,
    #[serde(default)]
    pub kde: KdeOptions,
    /// Required by, and only valid with, the kfda pipeline.
    #[serde(default)]
    pub kernel: Option<KernelFamily>,
    #[serde(default)]
    pub sigma: SigmaChoice,
    #[serde(default = "default_subspace_dim")]
    pub subspace_dim: usize,
    #[serde(default)]
    pub kfda: KfdaOptions,
    /// Used by the nn_dr pipeline.
    #[serde(default)]
    pub dr: DrConfig,
    #[serde(default = "default_gallery")]
    pub per_class_gallery: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// z-score features with gallery statistics before anything else.
    #[serde(default)]
    pub standardize: bool,
}

fn default_divergence() -> DivergenceKind {
    DivergenceKind::HellingerSquared
}

fn default_subspace_dim() -> usize {
    2
}

fn default_gallery() -> usize {
    3
}

fn default_repetitions() -> usize {
    5
}

impl ExperimentConfig {
    /// A config with defaults everywhere except the data source.
    pub fn new(data: DataSource) -> Self {
        Self {
            data,
            pipeline: Pipeline::default(),
            divergence: default_divergence(),
            kde: KdeOptions::default(),
            kernel: None,
            sigma: SigmaChoice::default(),
            subspace_dim: default_subspace_dim(),
            kfda: KfdaOptions::default(),
            dr: DrConfig::default(),
            per_class_gallery: default_gallery(),
            repetitions: default_repetitions(),
            seed: 0,
            standardize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.pipeline, self.kernel) {
            (Pipeline::Kfda, None) => return Err(Error::config("kernel", "the kfda pipeline needs a kernel")),
            (Pipeline::Nn | Pipeline::NnDr, Some(_)) => {
                return Err(Error::config("kernel", "a kernel is only used by the kfda pipeline"))
            }
            _ => {}
        }
        if let SigmaChoice::Fixed(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("sigma", format!("must be > 0, got {s}")));
            }
        }
        if self.subspace_dim < 1 {
            return Err(Error::config("subspace_dim", "must be ≥ 1"));
        }
        if !(self.kfda.lambda > 0.0 && self.kfda.lambda.is_finite()) {
            return Err(Error::config("kfda.lambda", "must be > 0"));
        }
        if self.kfda.latent_dim == Some(0) {
            return Err(Error::config("kfda.latent_dim", "must be ≥ 1"));
        }
        if self.per_class_gallery < 1 {
            return Err(Error::config("per_class_gallery", "must be ≥ 1"));
        }
        if self.repetitions < 1 {
            return Err(Error::config("repetitions", "must be ≥ 1"));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| Error::config("data", e.to_string()))?;
            if self.pipeline == Pipeline::NnDr {
                self.dr.validate(spec.dim)?;
            }
        }
        if self.pipeline == Pipeline::NnDr {
            self.dr.cg.validate()?;
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Manifest { path } => load_dataset(path),
            DataSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }

    /// Short method label such as `NN-H`, `kFDA-HG` or `NN-J-DR`.
    pub fn method_name(&self) -> String {
        let letter = match self.divergence {
            DivergenceKind::HellingerSquared => "H",
            DivergenceKind::Jeffrey => "J",
        };
        match self.pipeline {
            Pipeline::Nn => format!("NN-{letter}"),
            Pipeline::NnDr => format!("NN-{letter}-DR"),
            Pipeline::Kfda => {
                format!("kFDA-{}", self.kernel.map(|k| k.short_name().to_ascii_uppercase()).unwrap_or_default())
            }
        }
    }
}

/// Summary of one learned projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrSummary {
    pub iterations: usize,
    pub stop: StopReason,
    pub line_search_failed: bool,
    pub trace: Vec<TraceRow>,
    /// Learned `W`, one inner vector per row.
    pub projection: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub index: usize,
    pub seed: u64,
    pub gallery: Vec<String>,
    pub probe: Vec<String>,
    pub predictions: Vec<usize>,
    pub truth: Vec<usize>,
    pub accuracy: f64,
    #[serde(default)]
    pub sigma: Option<f64>,
    /// `(σ, leave-one-out gallery accuracy)` for every grid value tried.
    #[serde(default)]
    pub sigma_scores: Vec<(f64, f64)>,
    #[serde(default)]
    pub kfda_latent_dim: Option<usize>,
    #[serde(default)]
    pub dr: Option<DrSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timings {
    pub total_seconds: f64,
    pub repetition_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub num_sets: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub repetitions: Vec<RepetitionReport>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over repetitions (0 for a single one).
    pub std_accuracy: f64,
    /// Wall-clock times; kept out of `report.json` so that file stays reproducible.
    #[serde(skip)]
    pub timings: Timings,
}

/// Gallery and probe divergences, or baseline Grams, for one repetition.
fn kernel_inputs(
    gallery: &[FeatureSet],
    probe: &[FeatureSet],
    spec: &KernelSpec,
    kde: &KdeOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match spec.family.divergence() {
        Some(kind) => {
            Ok((divergence_matrix(gallery, kind, kde)?.values, cross_divergences(gallery, probe, kind, kde)?))
        }
        None => {
            let g = baseline_representations(gallery, spec)?;
            let p = baseline_representations(probe, spec)?;
            Ok((baseline_gram(&g, &g, spec), baseline_gram(&g, &p, spec)))
        }
    }
}

fn to_gram(values: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    match spec.family.divergence() {
        Some(_) => gram_from_divergences(values, spec),
        None => Ok(values.clone()),
    }
}

fn latent_dim_for(opts: &KfdaOptions, labels: &[usize]) -> usize {
    let classes = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    let cap = classes.saturating_sub(1).max(1);
    opts.latent_dim.map_or(cap, |r| r.min(cap))
}

/// Leave-one-out accuracy of kFDA + latent NN on the gallery alone.
fn loo_score(gram: &DMatrix<f64>, labels: &[usize], opts: &KfdaOptions) -> f64 {
    let m = labels.len();
    let mut hits = 0usize;
    for held in 0..m {
        let keep: Vec<usize> = (0..m).filter(|&i| i != held).collect();
        let sub = gram.select_rows(&keep).select_columns(&keep);
        let sub_labels: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
        let cross = gram.select_rows(&keep).select_columns(&[held]);
        let r = latent_dim_for(opts, &sub_labels);
        let Ok(model) = kfda_fit(&sub, &sub_labels, Some(r), opts.lambda) else {
            continue;
        };
        if let Ok(pred) = model.classify(&cross) {
            if pred[0] == labels[held] {
                hits += 1;
            }
        }
    }
    hits as f64 / m as f64
}

/// Picks σ by leave-one-out accuracy on the gallery; ties keep the smaller σ.
pub fn select_sigma(
    gallery_values: &DMatrix<f64>,
    labels: &[usize],
    family: KernelFamily,
    subspace_dim: usize,
    opts: &KfdaOptions,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let scores: Vec<(f64, f64)> = SIGMA_GRID
        .par_iter()
        .map(|&sigma| {
            let spec = KernelSpec { family, sigma, subspace_dim };
            let gram = to_gram(gallery_values, &spec)?;
            Ok((sigma, loo_score(&gram, labels, opts)))
        })
        .collect::<Result<_>>()?;
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok((best.0, scores))
}

/// Fitted model, chosen σ (none for the baselines) and the `(σ, LOO accuracy)` grid scores.
pub type KfdaStage = (KfdaModel, Option<f64>, Vec<(f64, f64)>);

/// Fits kFDA on the gallery and returns the model with its chosen σ.
pub fn fit_kfda_stage(
    gallery_values: &DMatrix<f64>,
    gallery_labels: &[usize],
    config: &ExperimentConfig,
) -> Result<KfdaStage> {
    let family = config.kernel.ok_or_else(|| Error::config("kernel", "missing"))?;
    let (sigma, scores) = match (family.divergence(), config.sigma) {
        (None, _) => (None, Vec::new()),
        (Some(_), SigmaChoice::Fixed(s)) => (Some(s), Vec::new()),
        (Some(_), SigmaChoice::Search(_)) => {
            let (s, scores) = select_sigma(gallery_values, gallery_labels, family, config.subspace_dim, &config.kfda)?;
            (Some(s), scores)
        }
    };
    let spec = KernelSpec { family, sigma: sigma.unwrap_or(1.0), subspace_dim: config.subspace_dim };
    let gram = to_gram(gallery_values, &spec)?;
    let r = latent_dim_for(&config.kfda, gallery_labels);
    let mut model = kfda_fit(&gram, gallery_labels, Some(r), config.kfda.lambda)?;
    model.kernel = Some(spec);
    Ok((model, sigma, scores))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// One split of the protocol. Everything fitted here sees only `gallery_idx`.
pub fn run_repetition(
    config: &ExperimentConfig,
    data: &Dataset,
    gallery_idx: &[usize],
    probe_idx: &[usize],
    index: usize,
    seed: u64,
) -> Result<RepetitionReport> {
    let data = if config.standardize { data.standardized_by(gallery_idx) } else { data.clone() };
    let gallery: Vec<FeatureSet> = gallery_idx.iter().map(|&i| data.sets[i].clone()).collect();
    let probe: Vec<FeatureSet> = probe_idx.iter().map(|&i| data.sets[i].clone()).collect();
    let g_labels: Vec<usize> = gallery.iter().map(|s| s.label).collect();
    let truth: Vec<usize> = probe.iter().map(|s| s.label).collect();

    let mut rep = RepetitionReport {
        index,
        seed,
        gallery: gallery.iter().map(|s| s.id.clone()).collect(),
        probe: probe.iter().map(|s| s.id.clone()).collect(),
        predictions: Vec::new(),
        truth: truth.clone(),
        accuracy: 0.0,
        sigma: None,
        sigma_scores: Vec::new(),
        kfda_latent_dim: None,
        dr: None,
    };

    rep.predictions = match config.pipeline {
        Pipeline::Nn => {
            let d = cross_divergences(&gallery, &probe, config.divergence, &config.kde)?;
            nn_classify(&d, &g_labels)?
        }
        Pipeline::NnDr => {
            let dr_cfg = DrConfig { divergence: config.divergence, seed, ..config.dr.clone() };
            let out = learn_projection(&gallery, &dr_cfg)?;
            let w = out.projection.matrix();
            let pg: Vec<FeatureSet> = gallery.iter().map(|s| s.project(w)).collect();
            let pp: Vec<FeatureSet> = probe.iter().map(|s| s.project(w)).collect();
            let d = cross_divergences(&pg, &pp, config.divergence, &config.kde)?;
            rep.dr = Some(DrSummary {
                iterations: out.trace.iterations(),
                stop: out.trace.stop,
                line_search_failed: out.trace.line_search_failed,
                trace: out.trace.rows.clone(),
                projection: matrix_rows(w),
            });
            nn_classify(&d, &g_labels)?
        }
        Pipeline::Kfda => {
            let family = config.kernel.ok_or_else(|| Error::config("kernel", "missing"))?;
            let probe_spec = KernelSpec { family, sigma: 1.0, subspace_dim: config.subspace_dim };
            let (gv, cv) = kernel_inputs(&gallery, &probe, &probe_spec, &config.kde)?;
            let (model, sigma, scores) = fit_kfda_stage(&gv, &g_labels, config)?;
            let spec = model.kernel.expect("kernel recorded at fit");
            let cross = to_gram(&cv, &spec)?;
            rep.sigma = sigma;
            rep.sigma_scores = scores;
            rep.kfda_latent_dim = Some(model.latent_dim);
            model.classify(&cross)?
        }
    };
    rep.accuracy = accuracy(&rep.predictions, &truth)?;
    Ok(rep)
}

/// Per-repetition seeds drawn from one generator seeded by `seed`.
pub fn repetition_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let start = Instant::now();
    let data = config.load_data()?;
    if config.pipeline == Pipeline::NnDr {
        config.dr.validate(data.dim)?;
    }
    let seeds = repetition_seeds(config.seed, config.repetitions);
    let results: Vec<(RepetitionReport, f64)> = seeds
        .par_iter()
        .enumerate()
        .map(|(index, &seed)| {
            let t = Instant::now();
            let (g, p) = split_indices(&data, config.per_class_gallery, seed)?;
            let rep = run_repetition(config, &data, &g, &p, index, seed)?;
            Ok((rep, t.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;
    let (repetitions, secs): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let accs: Vec<f64> = repetitions.iter().map(|r| r.accuracy).collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std =
        if accs.len() > 1 { (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Ok(Report {
        method: config.method_name(),
        config: config.clone(),
        config_hash: io::content_hash(config),
        num_sets: data.len(),
        num_classes: data.num_classes(),
        dim: data.dim,
        repetitions,
        mean_accuracy: mean,
        std_accuracy: std,
        timings: Timings { total_seconds: start.elapsed().as_secs_f64(), repetition_seconds: secs },
    })
}

impl Report {
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("repetition,seed,accuracy,sigma\n");
        for r in &self.repetitions {
            let sigma = r.sigma.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.index, r.seed, r.accuracy, sigma));
        }
        out
    }

    /// Concatenated optimizer traces, or `None` when no projection was learned.
    pub fn trace_csv(&self) -> Option<String> {
        let mut out = String::from("repetition,iteration,cost,grad_norm,step\n");
        let mut any = false;
        for r in &self.repetitions {
            if let Some(dr) = &r.dr {
                any = true;
                for t in &dr.trace {
                    out.push_str(&format!("{},{},{},{},{}\n", r.index, t.iteration, t.cost, t.grad_norm, t.step));
                }
            }
        }
        any.then_some(out)
    }
}

/// Writes `report.json`, `accuracy.csv`, `timings.json` and, when a
/// projection was learned, `trace.csv` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    io::write_json(&dir.join("report.json"), report)?;
    io::write_text(&dir.join("accuracy.csv"), &report.accuracy_csv())?;
    io::write_json(&dir.join("timings.json"), &report.timings)?;
    let trace = dir.join("trace.csv");
    match report.trace_csv() {
        Some(csv) => io::write_text(&trace, &csv)?,
        None => {
            if trace.exists() {
                std::fs::remove_file(&trace).map_err(|e| Error::io(&trace, e))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(sep: f64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            sets_per_class: 5,
            samples_per_set: 20,
            dim: 4,
            class_separation: sep,
            within_class_jitter: 0.3,
            seed: 3,
        }
    }

    fn config(pipeline: Pipeline, kernel: Option<KernelFamily>) -> ExperimentConfig {
        ExperimentConfig {
            pipeline,
            kernel,
            repetitions: 2,
            per_class_gallery: 2,
            dr: DrConfig {
                target_dim: 2,
                cg: crate::manifold::CgOptions { max_iters: 5, ..Default::default() },
                ..Default::default()
            },
            ..ExperimentConfig::new(DataSource::Synthetic(synthetic(6.0)))
        }
    }

    #[test]
    fn validation_catches_inconsistent_combinations() {
        assert!(config(Pipeline::Kfda, None).validate().is_err());
        assert!(config(Pipeline::Nn, Some(KernelFamily::HellingerGaussian)).validate().is_err());
        let mut c = config(Pipeline::Nn, None);
        c.repetitions = 0;
        assert!(matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "repetitions"));
        let mut c = config(Pipeline::NnDr, None);
        c.dr.target_dim = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sigma_choice_parses() {
        assert_eq!("grid".parse::<SigmaChoice>().unwrap(), SigmaChoice::default());
        assert_eq!("0.5".parse::<SigmaChoice>().unwrap(), SigmaChoice::Fixed(0.5));
        assert!("x".parse::<SigmaChoice>().is_err());
        let json: SigmaChoice = serde_json::from_str("\"grid\"").unwrap();
        assert_eq!(json, SigmaChoice::default());
        let json: SigmaChoice = serde_json::from_str("0.05").unwrap();
        assert_eq!(json, SigmaChoice::Fixed(0.05));
    }

    #[test]
    fn every_pipeline_runs_and_reports() {
        for (p, k) in [
            (Pipeline::Nn, None),
            (Pipeline::Kfda, Some(KernelFamily::HellingerGaussian)),
            (Pipeline::Kfda, Some(KernelFamily::GrassmannProjection)),
            (Pipeline::Kfda, Some(KernelFamily::SpdLogEuclidean)),
            (Pipeline::NnDr, None),
        ] {
            let report = run_experiment(&config(p, k)).unwrap();
            assert_eq!(report.repetitions.len(), 2);
            assert!(report.mean_accuracy >= 0.0 && report.mean_accuracy <= 1.0);
            let sigma_searched = k.is_some_and(|k| k.divergence().is_some());
            for r in &report.repetitions {
                assert_eq!(r.sigma.is_some(), sigma_searched);
                if let Some(s) = r.sigma {
                    assert!(SIGMA_GRID.contains(&s));
                    assert_eq!(r.sigma_scores.len(), SIGMA_GRID.len());
                }
                assert_eq!(r.dr.is_some(), p == Pipeline::NnDr);
            }
        }
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&config(Pipeline::NnDr, None)).unwrap();
        emit_report(&report, dir.path()).unwrap();
        let back: Report = io::read_json(&dir.path().join("report.json")).unwrap();
        assert_eq!(Report { timings: Timings::default(), ..report.clone() }, back);
        let acc = std::fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
        assert_eq!(acc.lines().count(), 1 + report.repetitions.len());
        assert!(dir.path().join("trace.csv").exists());

        let nn = run_experiment(&config(Pipeline::Nn, None)).unwrap();
        emit_report(&nn, dir.path()).unwrap();
        assert!(!dir.path().join("trace.csv").exists());
    }

    #[test]
    fn same_seed_gives_identical_json() {
        let c = config(Pipeline::Kfda, Some(KernelFamily::HellingerLaplace));
        let a = serde_json::to_string(&run_experiment(&c).unwrap()).unwrap();
        let b = serde_json::to_string(&run_experiment(&c).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fitted_stages_ignore_probe_contents() {
        // tag each probe set by overwriting it; nothing fitted may change
        let c = config(Pipeline::NnDr, None);
        let data = c.load_data().unwrap();
        let (g, p) = split_indices(&data, 2, 9).unwrap();
        let mut tampered = data.clone();
        for &i in &p {
            tampered.sets[i].features = tampered.sets[i].features.map(|v| 100.0 + 7.0 * v);
        }
        let mut with_std = c.clone();
        with_std.standardize = true;
        for cfg in [&c, &with_std] {
            let a = run_repetition(cfg, &data, &g, &p, 0, 9).unwrap();
            let b = run_repetition(cfg, &tampered, &g, &p, 0, 9).unwrap();
            assert_eq!(a.dr, b.dr);
        }

        let k = config(Pipeline::Kfda, Some(KernelFamily::JeffreyExponential));
        let a = run_repetition(&k, &data, &g, &p, 0, 9).unwrap();
        let b = run_repetition(&k, &tampered, &g, &p, 0, 9).unwrap();
        assert_eq!((a.sigma, a.sigma_scores), (b.sigma, b.sigma_scores));
    }

    #[test]
    fn clean_benchmark_is_accurate() {
        let mut c = config(Pipeline::Nn, None);
        c.data = DataSource::Synthetic(SyntheticSpec {
            samples_per_set: 50,
            dim: 5,
            class_separation: 10.0,
            ..synthetic(10.0)
        });
        c.repetitions = 3;
        assert!(run_experiment(&c).unwrap().mean_accuracy >= 0.95);
    }

    #[test]
    fn threads_env_rejects_garbage() {
        // only the parse path is exercised; the pool itself is process-global
        std::env::set_var(THREADS_ENV, "zero");
        assert!(configure_threads().is_err());
        std::env::remove_var(THREADS_ENV);
        assert!(configure_threads().is_ok());
    }
}
