//! Feature-set ingestion, synthetic generation and gallery/probe splitting.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// One image-set: `n × D` feature rows plus a dense class id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub id: String,
    pub label: usize,
    /// Rows are samples.
    pub features: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(id: impl Into<String>, label: usize, features: DMatrix<f64>) -> Result<Self> {
        let id = id.into();
        if features.nrows() < 2 {
            return Err(Error::TooFewSamples { id, n: features.nrows() });
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidArgument(format!("set {id:?} has D = 0")));
        }
        for i in 0..features.nrows() {
            for j in 0..features.ncols() {
                if !features[(i, j)].is_finite() {
                    return Err(Error::NonFinite { id, row: i, col: j });
                }
            }
        }
        Ok(Self { id, label, features })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Returns the set mapped through `x ↦ Wᵀx` (features become `n × d`).
    pub fn project(&self, w: &DMatrix<f64>) -> FeatureSet {
        FeatureSet { id: self.id.clone(), label: self.label, features: &self.features * w }
    }
}

/// An ordered collection of feature sets sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sets: Vec<FeatureSet>,
    pub dim: usize,
    /// External label names, indexed by dense label id.
    pub label_names: Vec<String>,
}

impl Dataset {
    /// Validates homogeneity. Labels must already be dense ids into `label_names`.
    pub fn new(sets: Vec<FeatureSet>, label_names: Vec<String>) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::InvalidArgument("dataset has no sets".into()))?;
        let dim = first.dim();
        for s in &sets {
            if s.dim() != dim {
                return Err(Error::DimensionMismatch {
                    first: first.id.clone(),
                    first_dim: dim,
                    other: s.id.clone(),
                    other_dim: s.dim(),
                });
            }
            if s.label >= label_names.len() {
                return Err(Error::InvalidArgument(format!(
                    "set {:?} has label {} but only {} classes are named",
                    s.id,
                    s.label,
                    label_names.len()
                )));
            }
        }
        Ok(Self { sets, dim, label_names })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sets.iter().map(|s| s.id.clone()).collect()
    }

    /// Sub-dataset with the given set indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sets: indices.iter().map(|&i| self.sets[i].clone()).collect(),
            dim: self.dim,
            label_names: self.label_names.clone(),
        }
    }

    /// Per-dimension z-scoring with statistics pooled over every sample of every set.
    pub fn standardized(&self) -> Dataset {
        let all: Vec<usize> = (0..self.len()).collect();
        self.standardized_by(&all)
    }

    /// Per-dimension z-scoring of every set with statistics pooled over the
    /// samples of `reference` sets only.
    pub fn standardized_by(&self, reference: &[usize]) -> Dataset {
        let refs: Vec<&FeatureSet> = reference.iter().map(|&i| &self.sets[i]).collect();
        let total: usize = refs.iter().map(|s| s.len()).sum();
        let mut mean = DVector::zeros(self.dim);
        for s in &refs {
            for r in s.features.row_iter() {
                mean += r.transpose();
            }
        }
        mean /= total.max(1) as f64;
        let mut var = DVector::<f64>::zeros(self.dim);
        for s in &refs {
            for r in s.features.row_iter() {
                let d = r.transpose() - &mean;
                var += d.component_mul(&d);
            }
        }
        var /= (total.max(2) - 1) as f64;
        let scale = var.map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 });
        let sets = self
            .sets
            .iter()
            .map(|s| {
                let mut f = s.features.clone();
                for mut r in f.row_iter_mut() {
                    for j in 0..self.dim {
                        r[j] = (r[j] - mean[j]) * scale[j];
                    }
                }
                FeatureSet { id: s.id.clone(), label: s.label, features: f }
            })
            .collect();
        Dataset { sets, dim: self.dim, label_names: self.label_names.clone() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub sets: Vec<ManifestEntry>,
}

/// Loads every feature file listed in a JSON manifest.
///
/// String labels are remapped to `0..C` in first-seen order; paths are
/// resolved relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: Manifest = io::read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut label_ids: HashMap<String, usize> = HashMap::new();
    let mut label_names = Vec::new();
    let mut sets = Vec::with_capacity(manifest.sets.len());
    for entry in &manifest.sets {
        let file: PathBuf = base.join(&entry.path);
        let features = io::read_csv_matrix(&file)?;
        let next = label_names.len();
        let label = *label_ids.entry(entry.label.clone()).or_insert_with(|| {
            label_names.push(entry.label.clone());
            next
        });
        sets.push(FeatureSet::new(entry.id.clone(), label, features)?);
    }
    Dataset::new(sets, label_names)
}

/// Writes `dir/manifest.json` plus one CSV per set under `dir/sets/`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.sets {
        let rel = format!("sets/{}.csv", s.id);
        io::write_csv_matrix(&dir.join(&rel), &s.features)?;
        entries.push(ManifestEntry { id: s.id.clone(), label: dataset.label_names[s.label].clone(), path: rel });
    }
    let manifest_path = dir.join("manifest.json");
    io::write_json(&manifest_path, &Manifest { sets: entries })?;
    Ok(manifest_path)
}

/// Parameters of the synthetic labeled-set generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub sets_per_class: usize,
    pub samples_per_set: usize,
    pub dim: usize,
    pub class_separation: f64,
    pub within_class_jitter: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [("classes", self.classes), ("sets_per_class", self.sets_per_class), ("dim", self.dim)];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::config(name, "must be ≥ 1"));
            }
        }
        if self.samples_per_set < 2 {
            return Err(Error::config("samples_per_set", "must be ≥ 2"));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config("class_separation", "must be finite and ≥ 0"));
        }
        if !(self.within_class_jitter >= 0.0 && self.within_class_jitter.is_finite()) {
            return Err(Error::config("within_class_jitter", "must be finite and ≥ 0"));
        }
        Ok(())
    }
}

fn normal_vector(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

/// Gaussian blobs: class means on a sphere of radius `class_separation`,
/// per-set offsets scaled by `within_class_jitter`, unit within-set noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<DVector<f64>> = (0..spec.classes)
        .map(|_| {
            let mut v = normal_vector(&mut rng, spec.dim);
            while v.norm() < 1e-12 {
                v = normal_vector(&mut rng, spec.dim);
            }
            v.normalize() * spec.class_separation
        })
        .collect();

    let mut sets = Vec::with_capacity(spec.classes * spec.sets_per_class);
    for (c, mean) in means.iter().enumerate() {
        for s in 0..spec.sets_per_class {
            let center = mean + normal_vector(&mut rng, spec.dim) * spec.within_class_jitter;
            let mut features = DMatrix::zeros(spec.samples_per_set, spec.dim);
            for i in 0..spec.samples_per_set {
                for j in 0..spec.dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features[(i, j)] = center[j] + z;
                }
            }
            sets.push(FeatureSet::new(format!("c{c}_s{s}"), c, features)?);
        }
    }
    let names = (0..spec.classes).map(|c| format!("class{c}")).collect();
    Dataset::new(sets, names)
}

/// Index form of [`split_gallery_probe`]; both lists are in dataset order.
pub fn split_indices(dataset: &Dataset, per_class_gallery: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if per_class_gallery == 0 {
        return Err(Error::InvalidArgument("per_class_gallery must be ≥ 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, s) in dataset.sets.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    for (label, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() <= per_class_gallery {
            return Err(Error::ClassTooSmall { label, size: members.len(), requested: per_class_gallery });
        }
        members.shuffle(&mut rng);
        gallery.extend_from_slice(&members[..per_class_gallery]);
        probe.extend_from_slice(&members[per_class_gallery..]);
    }
    gallery.sort_unstable();
    probe.sort_unstable();
    Ok((gallery, probe))
}

/// Random per-class partition into gallery and probe sets.
pub fn split_gallery_probe(dataset: &Dataset, per_class_gallery: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (g, p) = split_indices(dataset, per_class_gallery, seed)?;
    Ok((dataset.subset(&g), dataset.subset(&p)))
}
