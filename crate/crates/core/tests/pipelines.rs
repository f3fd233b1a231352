use statdiv::dataset::{generate_synthetic, SyntheticSpec};
use statdiv::density::KdeOptions;
use statdiv::dimred::{compactness_ratio, learn_projection, DrConfig};
use statdiv::divergence::{divergence_matrix, DivergenceKind};
use statdiv::experiment::{run_experiment, DataSource, ExperimentConfig};

fn synthetic(separation: f64, sets_per_class: usize, samples: usize, dim: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 3,
        sets_per_class,
        samples_per_set: samples,
        dim,
        class_separation: separation,
        within_class_jitter: 0.3,
        seed,
    }
}

#[test]
fn separated_classes_are_recognised() {
    for kind in [DivergenceKind::HellingerSquared, DivergenceKind::Jeffrey] {
        let mut cfg = ExperimentConfig::new(DataSource::Synthetic(synthetic(10.0, 6, 50, 5, 3)));
        cfg.divergence = kind;
        cfg.repetitions = 2;
        let report = run_experiment(&cfg).unwrap();
        assert!(report.mean_accuracy >= 0.95, "{kind:?}: {}", report.mean_accuracy);
    }
}

#[test]
fn identical_classes_give_chance() {
    let mut cfg = ExperimentConfig::new(DataSource::Synthetic(synthetic(0.0, 8, 30, 3, 4)));
    cfg.repetitions = 10;
    let report = run_experiment(&cfg).unwrap();
    assert!(report.mean_accuracy > 0.1 && report.mean_accuracy < 0.6, "{}", report.mean_accuracy);
}

#[test]
fn kfda_pipeline_runs_from_config_json() {
    let cfg: ExperimentConfig = serde_json::from_str(
        r#"{ "data": { "source": "synthetic", "classes": 3, "sets_per_class": 5, "samples_per_set": 30,
                       "dim": 4, "class_separation": 8.0, "within_class_jitter": 0.3, "seed": 9 },
             "pipeline": "kfda", "kernel": "hg", "repetitions": 2 }"#,
    )
    .unwrap();
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.method, "kFDA-HG");
    assert!(report.repetitions.iter().all(|r| r.sigma.is_some()));
    assert!(report.mean_accuracy >= 0.9);
}

#[test]
fn learned_projection_tightens_classes() {
    let mut spec = synthetic(3.0, 4, 20, 12, 1);
    spec.within_class_jitter = 0.5;
    let ds = generate_synthetic(&spec).unwrap();
    let cfg = DrConfig { target_dim: 2, seed: 1, ..Default::default() };
    let out = learn_projection(&ds.sets, &cfg).unwrap();
    assert!(out.trace.is_non_increasing());
    assert!(out.trace.costs().last().unwrap() < &out.trace.costs()[0]);

    let opts = KdeOptions::default();
    let kind = DivergenceKind::HellingerSquared;
    let labels = ds.labels();
    let before = compactness_ratio(&divergence_matrix(&ds.sets, kind, &opts).unwrap().values, &labels).unwrap();
    let projected: Vec<_> = ds.sets.iter().map(|s| s.project(out.projection.matrix())).collect();
    let after = compactness_ratio(&divergence_matrix(&projected, kind, &opts).unwrap().values, &labels).unwrap();
    assert!(after < before, "{before} -> {after}");
}
