use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use statdiv::classify::{accuracy, nn_classify, KfdaModel};
use statdiv::dataset::{generate_synthetic, load_dataset, write_dataset, Dataset, FeatureSet, SyntheticSpec};
use statdiv::density::{BandwidthPolicy, KdeOptions};
use statdiv::dimred::{learn_projection, load_projection, save_projection, DrConfig};
use statdiv::divergence::{cross_divergences, divergence_matrix, DivergenceKind};
use statdiv::experiment::{
    configure_threads, emit_report, fit_kfda_stage, run_experiment, DataSource, ExperimentConfig, Pipeline, SigmaChoice,
};
use statdiv::io;
use statdiv::kernels::{
    baseline_gram, baseline_representations, gram, gram_from_divergences, KernelFamily, KernelSpec,
};
use statdiv::validate::{run_suite, Scale};

#[derive(Parser)]
#[command(name = "statdiv", version, about = "Image-set matching with empirical Hellinger and Jeffrey divergences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset (manifest + one CSV per set).
    Gen(GenArgs),
    /// Pairwise divergence matrix of a dataset.
    Dist(DistArgs),
    /// Gram matrix of a dataset under one kernel.
    Gram(GramArgs),
    /// Learn a discriminative projection on the Grassmannian.
    TrainDr(TrainDrArgs),
    /// Classify probe sets against a gallery.
    Classify(ClassifyArgs),
    /// Run a full repeated gallery/probe experiment.
    Eval(EvalArgs),
    /// Run the built-in oracle, definiteness and gradient checks.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Div {
    Hellinger,
    Jeffrey,
}

impl From<Div> for DivergenceKind {
    fn from(d: Div) -> Self {
        match d {
            Div::Hellinger => DivergenceKind::HellingerSquared,
            Div::Jeffrey => DivergenceKind::Jeffrey,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kernel {
    Hg,
    Hl,
    J,
    Gda,
    Cdl,
}

impl From<Kernel> for KernelFamily {
    fn from(k: Kernel) -> Self {
        match k {
            Kernel::Hg => KernelFamily::HellingerGaussian,
            Kernel::Hl => KernelFamily::HellingerLaplace,
            Kernel::J => KernelFamily::JeffreyExponential,
            Kernel::Gda => KernelFamily::GrassmannProjection,
            Kernel::Cdl => KernelFamily::SpdLogEuclidean,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Nn,
    Kfda,
    NnDr,
}

impl From<PipelineArg> for Pipeline {
    fn from(p: PipelineArg) -> Self {
        match p {
            PipelineArg::Nn => Pipeline::Nn,
            PipelineArg::Kfda => Pipeline::Kfda,
            PipelineArg::NnDr => Pipeline::NnDr,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BandwidthArg {
    Silverman,
    Isotropic,
}

#[derive(Args)]
struct KdeArgs {
    /// Per-set bandwidth rule.
    #[arg(long, value_enum, default_value = "silverman")]
    bandwidth: BandwidthArg,
    /// Drop a sample's own kernel when evaluating its set's density.
    #[arg(long)]
    leave_one_out: bool,
}

impl KdeArgs {
    fn options(&self) -> KdeOptions {
        KdeOptions {
            bandwidth: match self.bandwidth {
                BandwidthArg::Silverman => BandwidthPolicy::PerSetSilverman,
                BandwidthArg::Isotropic => BandwidthPolicy::PerSetIsotropic,
            },
            leave_one_out: self.leave_one_out,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// JSON synthetic spec; individual flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    sets_per_class: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "hellinger")]
    divergence: Div,
    #[command(flatten)]
    kde: KdeArgs,
    /// Output CSV (a `.json` sidecar is written next to it).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GramArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kernel: Kernel,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Basis size for the projection kernel.
    #[arg(long, default_value_t = 2)]
    subspace_dim: usize,
    #[command(flatten)]
    kde: KdeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDrArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON projection-learning config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_enum)]
    divergence: Option<Div>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for projection.csv, projection.json and trace.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long, value_enum, default_value = "nn")]
    pipeline: PipelineArg,
    /// Gallery manifest (not needed with --model).
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Probe manifest.
    #[arg(long)]
    probe: PathBuf,
    #[arg(long, value_enum, default_value = "hellinger")]
    divergence: Div,
    /// Projection CSV applied to both sides before matching (nn only).
    #[arg(long)]
    projection: Option<PathBuf>,
    #[arg(long, value_enum)]
    kernel: Option<Kernel>,
    /// A number or `grid` (leave-one-out search on the gallery).
    #[arg(long, default_value = "grid")]
    sigma: String,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    #[arg(long, default_value_t = 2)]
    subspace_dim: usize,
    /// Write the fitted kFDA bundle to this directory.
    #[arg(long)]
    save_model: Option<PathBuf>,
    /// Load a kFDA bundle instead of fitting.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    kde: KdeArgs,
    /// Output directory for predictions.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    pipeline: Option<PipelineArg>,
    #[arg(long, value_enum)]
    divergence: Option<Div>,
    #[arg(long, value_enum)]
    kernel: Option<Kernel>,
    /// A number or `grid`.
    #[arg(long)]
    sigma: Option<String>,
    /// Target dimension for nn-dr.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Run the full-size checks instead of the quick ones.
    #[arg(long)]
    full: bool,
}

/// Validation failures exit with 1 and I/O failures with 2.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<statdiv::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {}", describe(&error));
            ExitCode::from(code)
        }
    }
}

/// Joins the cause chain, skipping causes whose text is already shown.
fn describe(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let wrap = |error: anyhow::Error| Failure { code: exit_code(&error), error };
    configure_threads().map_err(|e| wrap(e.into()))?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a).map_err(wrap),
        Command::Dist(a) => cmd_dist(a).map_err(wrap),
        Command::Gram(a) => cmd_gram(a).map_err(wrap),
        Command::TrainDr(a) => cmd_train_dr(a).map_err(wrap),
        Command::Classify(a) => cmd_classify(a).map_err(wrap),
        Command::Eval(a) => cmd_eval(a).map_err(wrap),
        Command::Validate(a) => cmd_validate(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => io::read_json::<SyntheticSpec>(p)?,
        None => SyntheticSpec {
            classes: 3,
            sets_per_class: 6,
            samples_per_set: 50,
            dim: 5,
            class_separation: 10.0,
            within_class_jitter: 0.3,
            seed: 0,
        },
    };
    if let Some(v) = a.classes {
        spec.classes = v;
    }
    if let Some(v) = a.sets_per_class {
        spec.sets_per_class = v;
    }
    if let Some(v) = a.samples {
        spec.samples_per_set = v;
    }
    if let Some(v) = a.dim {
        spec.dim = v;
    }
    if let Some(v) = a.separation {
        spec.class_separation = v;
    }
    if let Some(v) = a.jitter {
        spec.within_class_jitter = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let ds = generate_synthetic(&spec)?;
    let manifest = write_dataset(&ds, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_dist(a: DistArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let m = divergence_matrix(&ds.sets, a.divergence.into(), &a.kde.options())?;
    m.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_gram(a: GramArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let spec = KernelSpec { family: a.kernel.into(), sigma: a.sigma, subspace_dim: a.subspace_dim };
    let g = gram(&ds.sets, &spec, &a.kde.options())?;
    g.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_train_dr(a: TrainDrArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => io::read_json::<DrConfig>(p)?,
        None => DrConfig::default(),
    };
    if let Some(d) = a.dim {
        cfg.target_dim = d;
    }
    if let Some(k) = a.divergence {
        cfg.divergence = k.into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = learn_projection(&ds.sets, &cfg)?;
    let trace_path = a.out.join("trace.csv");
    out.trace.save_csv(&trace_path)?;
    save_projection(&a.out.join("projection.csv"), &out.projection, &cfg, Some(PathBuf::from("trace.csv")))?;
    eprintln!(
        "{} iterations, cost {} -> {} ({:?})",
        out.trace.iterations(),
        out.trace.rows[0].cost,
        out.trace.rows.last().map_or(f64::NAN, |r| r.cost),
        out.trace.stop
    );
    println!("{}", a.out.join("projection.csv").display());
    Ok(())
}

/// Re-expresses the probe labels in the gallery's label numbering.
fn align_labels(gallery: &Dataset, probe: &Dataset) -> Result<Vec<Option<usize>>> {
    let truth = probe
        .sets
        .iter()
        .map(|s| {
            let name = &probe.label_names[s.label];
            gallery.label_names.iter().position(|n| n == name)
        })
        .collect();
    Ok(truth)
}

fn ensure_samedim(gallery: &[FeatureSet], probe: &[FeatureSet]) -> Result<()> {
    if let (Some(g), Some(p)) = (gallery.first(), probe.first()) {
        if g.dim() != p.dim() {
            bail!("gallery sets have D = {} but probe sets have D = {}", g.dim(), p.dim());
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    kde: KdeOptions,
    label_names: Vec<String>,
    sigma: Option<f64>,
    sigma_scores: Vec<(f64, f64)>,
}

fn cmd_classify(a: ClassifyArgs) -> Result<()> {
    let probe = load_dataset(&a.probe)?;
    let kde = a.kde.options();
    let pipeline: Pipeline = a.pipeline.into();

    let (gallery, predictions, extra) = match pipeline {
        Pipeline::Nn => {
            let gallery = load_dataset(a.gallery.as_deref().context("--gallery is required")?)?;
            ensure_samedim(&gallery.sets, &probe.sets)?;
            let (g, p) = match &a.projection {
                Some(path) => {
                    let w = load_projection(path)?;
                    let w = w.matrix();
                    (
                        gallery.sets.iter().map(|s| s.project(w)).collect::<Vec<_>>(),
                        probe.sets.iter().map(|s| s.project(w)).collect::<Vec<_>>(),
                    )
                }
                None => (gallery.sets.clone(), probe.sets.clone()),
            };
            let d = cross_divergences(&g, &p, a.divergence.into(), &kde)?;
            let labels: Vec<usize> = gallery.sets.iter().map(|s| s.label).collect();
            (gallery, nn_classify(&d, &labels)?, serde_json::json!({}))
        }
        Pipeline::Kfda => classify_kfda(&a, &probe, &kde)?,
        Pipeline::NnDr => bail!("use train-dr and then classify --pipeline nn --projection"),
    };

    let truth = align_labels(&gallery, &probe)?;
    let mut csv = String::from("probe,predicted,truth\n");
    for (s, (&pred, t)) in probe.sets.iter().zip(predictions.iter().zip(&truth)) {
        let t = t.map(|l| gallery.label_names[l].clone()).unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", s.id, gallery.label_names[pred], t));
    }
    io::write_text(&a.out.join("predictions.csv"), &csv)?;
    let acc = match truth.iter().copied().collect::<Option<Vec<usize>>>() {
        Some(t) => Some(accuracy(&predictions, &t)?),
        None => None,
    };
    io::write_json(
        &a.out.join("summary.json"),
        &serde_json::json!({ "pipeline": format!("{pipeline:?}").to_lowercase(), "accuracy": acc, "probes": probe.len(), "details": extra }),
    )?;
    if let Some(acc) = acc {
        println!("accuracy {acc:.4}");
    }
    Ok(())
}

fn classify_kfda(
    a: &ClassifyArgs,
    probe: &Dataset,
    kde: &KdeOptions,
) -> Result<(Dataset, Vec<usize>, serde_json::Value)> {
    let (model, gallery, meta) = match &a.model {
        Some(dir) => {
            let model = KfdaModel::load(dir)?;
            let gallery = load_dataset(&dir.join("gallery").join("manifest.json"))?;
            let meta: BundleMeta = io::read_json(&dir.join("bundle.json"))?;
            (model, gallery, meta)
        }
        None => {
            let gallery = load_dataset(a.gallery.as_deref().context("--gallery or --model is required")?)?;
            let family: KernelFamily = a.kernel.context("--kernel is required for kfda")?.into();
            let mut cfg = ExperimentConfig::new(DataSource::Manifest { path: PathBuf::new() });
            cfg.pipeline = Pipeline::Kfda;
            cfg.kernel = Some(family);
            cfg.sigma = a.sigma.parse::<SigmaChoice>()?;
            cfg.subspace_dim = a.subspace_dim;
            cfg.kfda.lambda = a.lambda;
            cfg.kde = kde.clone();
            cfg.validate()?;
            let values = gallery_values(&gallery.sets, family, a.subspace_dim, kde)?;
            let labels: Vec<usize> = gallery.sets.iter().map(|s| s.label).collect();
            let (mut model, sigma, scores) = fit_kfda_stage(&values, &labels, &cfg)?;
            model.gallery_ids = gallery.ids();
            let meta =
                BundleMeta { kde: kde.clone(), label_names: gallery.label_names.clone(), sigma, sigma_scores: scores };
            (model, gallery, meta)
        }
    };
    if let Some(dir) = &a.save_model {
        model.save(dir)?;
        write_dataset(&gallery, &dir.join("gallery"))?;
        io::write_json(&dir.join("bundle.json"), &meta)?;
    }
    ensure_samedim(&gallery.sets, &probe.sets)?;
    let spec = model.kernel.context("model has no kernel spec")?;
    let cross = cross_gram(&gallery.sets, &probe.sets, &spec, &meta.kde)?;
    let predictions = model.classify(&cross)?;
    let extra =
        serde_json::json!({ "sigma": meta.sigma, "sigma_scores": meta.sigma_scores, "latent_dim": model.latent_dim });
    Ok((gallery, predictions, extra))
}

fn gallery_values(
    sets: &[FeatureSet],
    family: KernelFamily,
    subspace_dim: usize,
    kde: &KdeOptions,
) -> Result<DMatrix<f64>> {
    let spec = KernelSpec { family, sigma: 1.0, subspace_dim };
    Ok(match family.divergence() {
        Some(kind) => divergence_matrix(sets, kind, kde)?.values,
        None => {
            let r = baseline_representations(sets, &spec)?;
            baseline_gram(&r, &r, &spec)
        }
    })
}

fn cross_gram(
    gallery: &[FeatureSet],
    probe: &[FeatureSet],
    spec: &KernelSpec,
    kde: &KdeOptions,
) -> Result<DMatrix<f64>> {
    Ok(match spec.family.divergence() {
        Some(kind) => gram_from_divergences(&cross_divergences(gallery, probe, kind, kde)?, spec)?,
        None => {
            let g = baseline_representations(gallery, spec)?;
            let p = baseline_representations(probe, spec)?;
            baseline_gram(&g, &p, spec)
        }
    })
}

fn resolve_relative(config_path: &Path, data: &mut DataSource) {
    if let DataSource::Manifest { path } = data {
        if path.is_relative() {
            if let Some(dir) = config_path.parent() {
                *path = dir.join(&*path);
            }
        }
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = io::read_json(&a.config)?;
    resolve_relative(&a.config, &mut cfg.data);
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.pipeline {
        cfg.pipeline = p.into();
    }
    if let Some(d) = a.divergence {
        cfg.divergence = d.into();
    }
    if let Some(k) = a.kernel {
        cfg.kernel = Some(k.into());
    }
    if let Some(s) = &a.sigma {
        cfg.sigma = s.parse()?;
    }
    if let Some(d) = a.dim {
        cfg.dr.target_dim = d;
    }
    let report = run_experiment(&cfg)?;
    emit_report(&report, &a.out)?;
    println!(
        "{}: accuracy {:.4} ± {:.4} over {} repetitions",
        report.method,
        report.mean_accuracy,
        report.std_accuracy,
        report.repetitions.len()
    );
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> std::result::Result<(), Failure> {
    let scale = if a.full { Scale::Full } else { Scale::Quick };
    let results = run_suite(scale).map_err(|e| {
        let error = anyhow::Error::from(e);
        Failure { code: exit_code(&error), error }
    })?;
    let mut failed = 0;
    for r in &results {
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Failure { code: 1, error: anyhow::anyhow!("{failed} checks failed") });
    }
    Ok(())
}
