//! Synthetic feature bundles with known class structure.
//!
//! Each class owns two small Gaussian mixtures, one per layer; an image's
//! local features are i.i.d. draws from its class's mixtures and its FC
//! descriptor is the class mean plus isotropic noise.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::store::{DatasetManifest, FeatureBundle, StoreError};

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub penultimate_dim: usize,
    pub last_dim: usize,
    pub penultimate_rows: usize,
    pub last_rows: usize,
    pub fc_dim: usize,
    pub components: usize,
    /// Spread of component means around zero.
    pub mean_scale: f64,
    pub fc_noise: f64,
    /// Distinct `sample_tag` values, assigned round-robin within each class.
    pub sample_tags: usize,
    /// Number of predefined split groups written into `split_tag` (0 = none).
    pub split_groups: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 5,
            per_class: 40,
            penultimate_dim: 8,
            last_dim: 12,
            penultimate_rows: 64,
            last_rows: 16,
            fc_dim: 32,
            components: 3,
            mean_scale: 2.0,
            fc_noise: 0.5,
            sample_tags: 4,
            split_groups: 0,
            seed: 7,
        }
    }
}

struct ClassMixture {
    weights: Vec<f64>,
    means: Array2<f64>,
    stds: Array2<f64>,
}

impl ClassMixture {
    fn random(components: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let raw: Vec<f64> = (0..components)
            .map(|_| rng.random_range(0.5..1.5))
            .collect();
        let total: f64 = raw.iter().sum();
        ClassMixture {
            weights: raw.into_iter().map(|w| w / total).collect(),
            means: Array2::from_shape_fn((components, dim), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            }),
            stds: Array2::from_shape_fn((components, dim), |_| rng.random_range(0.5..1.2)),
        }
    }

    fn sample(&self, rows: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let dim = self.means.ncols();
        let mut out = Array2::zeros((rows, dim));
        for mut row in out.outer_iter_mut() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut comp = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    comp = i;
                    break;
                }
            }
            for j in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                row[j] = self.means[[comp, j]] + self.stds[[comp, j]] * z;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub bundle: FeatureBundle,
    pub class: usize,
    pub sample_tag: String,
    pub split_tag: Option<String>,
}

pub fn class_name(c: usize) -> String {
    format!("class{c:02}")
}

/// Generates all images in class-major order.
pub fn generate(spec: &SyntheticSpec) -> Vec<SyntheticImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.fc_noise).expect("valid noise std");
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        let pen = ClassMixture::random(
            spec.components,
            spec.penultimate_dim,
            spec.mean_scale,
            &mut rng,
        );
        let last = ClassMixture::random(spec.components, spec.last_dim, spec.mean_scale, &mut rng);
        let fc_mean: Array1<f64> =
            Array1::from_shape_fn(spec.fc_dim, |_| rng.sample::<f64, _>(StandardNormal));
        for i in 0..spec.per_class {
            let penultimate = pen.sample(spec.penultimate_rows, &mut rng);
            let last_feats = last.sample(spec.last_rows, &mut rng);
            let fc = fc_mean.mapv(|m| m + noise.sample(&mut rng));
            let image_id = format!("{}_{i:03}", class_name(c));
            let split_tag = (spec.split_groups > 0).then(|| {
                (0..spec.split_groups)
                    .map(|g| {
                        let part = ["train", "val", "test"][(i + g) % 3];
                        format!("{g}:{part}")
                    })
                    .collect::<Vec<_>>()
                    .join(";")
            });
            images.push(SyntheticImage {
                bundle: FeatureBundle::new(image_id, penultimate, last_feats, fc)
                    .expect("synthetic bundle satisfies invariants"),
                class: c,
                sample_tag: format!("s{}", i % spec.sample_tags.max(1)),
                split_tag,
            });
        }
    }
    images
}

/// Writes the generated bundles and `manifest.json` into `dir`; returns the manifest path.
pub fn write_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf, StoreError> {
    std::fs::create_dir_all(dir)?;
    let images = generate(spec);
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        entries.push(img.bundle.save(
            dir,
            &class_name(img.class),
            Some(img.sample_tag),
            img.split_tag,
        )?);
    }
    let manifest = DatasetManifest {
        class_names: (0..spec.classes).map(class_name).collect(),
        entries,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
