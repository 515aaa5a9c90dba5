//! Multilayer local-feature merging and Fisher vector encoding.
//!
//! The penultimate layer's local features are kept as they are; the last
//! layer's features are projected by PCA down to the same channel count and
//! appended, giving one set of T1 + T2 local features per image. The Fisher
//! vector of that set under a diagonal GMM is the concatenation of three
//! blocks, laid out as `[weights (K) | means (K x D) | sigmas (K x D)]`:
//!
//! ```text
//! w_i      = 1/(T sqrt(w_i))   sum_t (gamma_i(x_t) - w_i)
//! mu_i^d   = 1/(T sqrt(w_i))   sum_t gamma_i(x_t) (x_t^d - mu_i^d) / sigma_i^d
//! sig_i^d  = 1/(T sqrt(2 w_i)) sum_t gamma_i(x_t) [(x_t^d - mu_i^d)^2 / (sigma_i^d)^2 - 1]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{self, GmmError, GmmModel};
use crate::pca::{self, PcaError, PcaModel};
use crate::store::{self, DatasetManifest, FeatureBundle, StoreError, Tensor};

pub const LAYOUT_TAG: &str = "w|mu|sigma";

/// Length K(2D + 1) of a Fisher vector.
pub const fn fv_len(k: usize, d: usize) -> usize {
    k * (2 * d + 1)
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("PCA output dimension {pca} does not match penultimate channels {penultimate}")]
    PcaMismatch { pca: usize, penultimate: usize },
    #[error("GMM dimension {gmm} does not match feature dimension {features}")]
    GmmMismatch { gmm: usize, features: usize },
    #[error("cannot encode an empty feature set")]
    Empty,
    #[error("non-finite value in {block} block of component {component}")]
    NonFinite {
        block: &'static str,
        component: usize,
    },
    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<EncodeError>,
    },
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedFeatureSet {
    /// (T1 + T2) x D1
    pub features: Array2<f64>,
    /// (T1, T2)
    pub source_counts: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherVector {
    pub values: Vec<f64>,
    pub k: usize,
    pub d: usize,
}

impl FisherVector {
    pub fn weight_block(&self) -> &[f64] {
        &self.values[..self.k]
    }

    pub fn mean_block(&self) -> &[f64] {
        &self.values[self.k..self.k + self.k * self.d]
    }

    pub fn sigma_block(&self) -> &[f64] {
        &self.values[self.k + self.k * self.d..]
    }

    /// Writes `<stem>.mlfv` plus a `<stem>.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), EncodeError> {
        let tensor_name = format!("{stem}.mlfv");
        store::write_tensor_file(&Tensor::from_vector(&self.values)?, &dir.join(&tensor_name))?;
        let sidecar = FvSidecar {
            k: self.k,
            d: self.d,
            layout: LAYOUT_TAG.into(),
            tensor: tensor_name,
        };
        store::write_atomic(
            &dir.join(format!("{stem}.json")),
            &serde_json::to_vec_pretty(&sidecar)?,
        )
        .map_err(StoreError::from)?;
        Ok(())
    }

    pub fn load(sidecar_path: &Path) -> Result<Self, EncodeError> {
        let bytes = std::fs::read(sidecar_path).map_err(StoreError::from)?;
        let sidecar: FvSidecar = serde_json::from_slice(&bytes)?;
        let dir = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
        let values: Vec<f64> = store::read_tensor_file(&dir.join(&sidecar.tensor))?
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        if values.len() != fv_len(sidecar.k, sidecar.d) || sidecar.layout != LAYOUT_TAG {
            return Err(EncodeError::GmmMismatch {
                gmm: fv_len(sidecar.k, sidecar.d),
                features: values.len(),
            });
        }
        Ok(FisherVector {
            values,
            k: sidecar.k,
            d: sidecar.d,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FvSidecar {
    k: usize,
    d: usize,
    layout: String,
    tensor: String,
}

/// Stacks penultimate features over PCA-projected last-layer features.
pub fn merge_layers(
    bundle: &FeatureBundle,
    pca: &PcaModel,
) -> Result<MergedFeatureSet, EncodeError> {
    let (t1, d1) = bundle.penultimate.dim();
    if pca.output_dim() != d1 {
        return Err(EncodeError::PcaMismatch {
            pca: pca.output_dim(),
            penultimate: d1,
        });
    }
    let projected = pca::project(pca, bundle.last.view())?;
    let t2 = projected.nrows();
    let features = concatenate(Axis(0), &[bundle.penultimate.view(), projected.view()])
        .expect("column counts agree");
    Ok(MergedFeatureSet {
        features,
        source_counts: (t1, t2),
    })
}

/// Fisher vector of a merged feature set.
pub fn encode_fv(model: &GmmModel, x_set: &MergedFeatureSet) -> Result<FisherVector, EncodeError> {
    let x = x_set.features.view();
    let (t, d) = x.dim();
    if d != model.dim() {
        return Err(EncodeError::GmmMismatch {
            gmm: model.dim(),
            features: d,
        });
    }
    if t == 0 {
        return Err(EncodeError::Empty);
    }
    let k = model.n_components();
    let (resp, _) = gmm::posteriors_batch(model, x)?;
    let sigma = model.variances.mapv(f64::sqrt);

    let mut values = vec![0.0; fv_len(k, d)];
    let (w_block, rest) = values.split_at_mut(k);
    let (mu_block, sig_block) = rest.split_at_mut(k * d);

    // Zeroth, first and second order statistics, accumulated in row order.
    let mut s0 = vec![0.0; k];
    let mut s1 = Array2::<f64>::zeros((k, d));
    let mut s2 = Array2::<f64>::zeros((k, d));
    for (row, g) in x.outer_iter().zip(resp.outer_iter()) {
        for i in 0..k {
            let gi = g[i];
            s0[i] += gi;
            if gi == 0.0 {
                continue;
            }
            for j in 0..d {
                let z = (row[j] - model.means[[i, j]]) / sigma[[i, j]];
                s1[[i, j]] += gi * z;
                s2[[i, j]] += gi * (z * z - 1.0);
            }
        }
    }

    let tf = t as f64;
    for i in 0..k {
        let w = model.weights[i];
        let norm = 1.0 / (tf * w.sqrt());
        let norm2 = 1.0 / (tf * (2.0 * w).sqrt());
        w_block[i] = norm * (s0[i] - tf * w);
        for j in 0..d {
            mu_block[i * d + j] = norm * s1[[i, j]];
            sig_block[i * d + j] = norm2 * s2[[i, j]];
        }
    }
    for (block, vals, width) in [
        ("weight", &*w_block, 1),
        ("mean", &*mu_block, d),
        ("sigma", &*sig_block, d),
    ] {
        if let Some(pos) = vals.iter().position(|v| !v.is_finite()) {
            return Err(EncodeError::NonFinite {
                block,
                component: pos / width,
            });
        }
    }
    Ok(FisherVector { values, k, d })
}

/// Loads, merges and encodes one image.
pub fn encode_bundle(
    bundle: &FeatureBundle,
    pca: &PcaModel,
    gmm: &GmmModel,
) -> Result<FisherVector, EncodeError> {
    let merged = merge_layers(bundle, pca)?;
    encode_fv(gmm, &merged)
}

/// Encodes every manifest entry. Any failure aborts the whole batch.
pub fn encode_dataset(
    manifest: &DatasetManifest,
    pca: &PcaModel,
    gmm: &GmmModel,
) -> Result<BTreeMap<String, FisherVector>, EncodeError> {
    let encoded: Vec<Result<(String, FisherVector), EncodeError>> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let wrap = |e: EncodeError| EncodeError::Image {
                image_id: entry.image_id.clone(),
                source: Box::new(e),
            };
            let bundle = FeatureBundle::load(manifest, entry).map_err(|e| wrap(e.into()))?;
            let fv = encode_bundle(&bundle, pca, gmm).map_err(wrap)?;
            Ok((entry.image_id.clone(), fv))
        })
        .collect();
    encoded.into_iter().collect()
}
