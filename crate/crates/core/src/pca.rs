//! Principal component analysis used to bring last-layer local features down
//! to the penultimate layer's channel count.
//!
//! The covariance is accumulated in a streaming fashion (pairwise merging of
//! per-batch mean and scatter), so fitting over a whole training split never
//! needs all local features in memory at once.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{self, StoreError, Tensor};

/// Eigenvalues at or below this fraction of the data scale count as zero.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("target dimension {target} exceeds input dimension {input}")]
    TargetTooLarge { target: usize, input: usize },
    #[error("target dimension must be positive")]
    ZeroTarget,
    #[error("need more than {target} samples, got {samples}")]
    InsufficientSamples { samples: usize, target: usize },
    #[error("expected {expected} columns, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("model header: {0}")]
    Header(#[from] serde_json::Error),
}

/// Running mean and scatter matrix of a stream of row vectors.
#[derive(Clone, Debug)]
pub struct CovarianceAccumulator {
    count: usize,
    mean: Array1<f64>,
    scatter: Array2<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        CovarianceAccumulator {
            count: 0,
            mean: Array1::zeros(dim),
            scatter: Array2::zeros((dim, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Folds a batch of rows into the running statistics.
    pub fn update(&mut self, batch: ArrayView2<f64>) -> Result<(), PcaError> {
        let (n, d) = batch.dim();
        if d != self.dim() {
            return Err(PcaError::DimensionMismatch {
                expected: self.dim(),
                actual: d,
            });
        }
        if n == 0 {
            return Ok(());
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(PcaError::NonFinite);
        }
        let batch_mean = batch.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = &batch - &batch_mean;
        let batch_scatter = centered.t().dot(&centered);

        let na = self.count as f64;
        let nb = n as f64;
        let total = na + nb;
        let delta = &batch_mean - &self.mean;
        let outer = delta
            .view()
            .insert_axis(Axis(1))
            .dot(&delta.view().insert_axis(Axis(0)));
        self.scatter = &self.scatter + &batch_scatter + &(outer * (na * nb / total));
        self.mean = &self.mean + &(delta * (nb / total));
        self.count += n;
        Ok(())
    }

    /// Sample covariance (divides by count - 1).
    pub fn covariance(&self) -> Array2<f64> {
        let denom = (self.count.max(2) - 1) as f64;
        &self.scatter / denom
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// target_dim x input_dim, rows are principal directions by descending variance.
    pub components: Array2<f64>,
    pub explained_variance: Array1<f64>,
    /// Set when fewer than target_dim directions carry variance.
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.components.nrows()
    }

    /// Zero-mean identity transform on `dim` dimensions.
    pub fn identity(dim: usize) -> Self {
        PcaModel {
            mean: Array1::zeros(dim),
            components: Array2::eye(dim),
            explained_variance: Array1::ones(dim),
            rank_deficient: false,
        }
    }

    pub fn save(&self, header_path: &Path) -> Result<(), PcaError> {
        let stem = header_stem(header_path);
        let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
        let header = PcaHeader {
            kind: "pca".into(),
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            rank_deficient: self.rank_deficient,
            mean: format!("{stem}.mean.mlfv"),
            components: format!("{stem}.components.mlfv"),
            explained_variance: format!("{stem}.explained_variance.mlfv"),
        };
        store::write_tensor_file(
            &Tensor::from_vector(&self.mean.to_vec())?,
            &dir.join(&header.mean),
        )?;
        store::write_tensor_file(
            &Tensor::from_matrix(&self.components)?,
            &dir.join(&header.components),
        )?;
        store::write_tensor_file(
            &Tensor::from_vector(&self.explained_variance.to_vec())?,
            &dir.join(&header.explained_variance),
        )?;
        store::write_atomic(header_path, &serde_json::to_vec_pretty(&header)?)
            .map_err(StoreError::from)?;
        Ok(())
    }

    pub fn load(header_path: &Path) -> Result<Self, PcaError> {
        let bytes = std::fs::read(header_path).map_err(StoreError::from)?;
        let header: PcaHeader = serde_json::from_slice(&bytes)?;
        let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
        let mean = store::read_tensor_file(&dir.join(&header.mean))?.to_vector();
        let components = store::read_tensor_file(&dir.join(&header.components))?;
        let components = components.to_matrix().ok_or(PcaError::DimensionMismatch {
            expected: 2,
            actual: components.shape().len(),
        })?;
        let explained_variance =
            store::read_tensor_file(&dir.join(&header.explained_variance))?.to_vector();
        if components.dim() != (header.output_dim, header.input_dim)
            || mean.len() != header.input_dim
        {
            return Err(PcaError::DimensionMismatch {
                expected: header.input_dim,
                actual: mean.len(),
            });
        }
        Ok(PcaModel {
            mean,
            components,
            explained_variance,
            rank_deficient: header.rank_deficient,
        })
    }
}

pub(crate) fn header_stem(header_path: &Path) -> String {
    header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

#[derive(Serialize, Deserialize)]
struct PcaHeader {
    kind: String,
    input_dim: usize,
    output_dim: usize,
    rank_deficient: bool,
    mean: String,
    components: String,
    explained_variance: String,
}

/// Fits PCA on the rows of `features`.
pub fn fit_pca(features: ArrayView2<f64>, target_dim: usize) -> Result<PcaModel, PcaError> {
    let mut acc = CovarianceAccumulator::new(features.ncols());
    acc.update(features)?;
    fit_from_accumulator(&acc, target_dim)
}

pub fn fit_from_accumulator(
    acc: &CovarianceAccumulator,
    target_dim: usize,
) -> Result<PcaModel, PcaError> {
    let input = acc.dim();
    if target_dim == 0 {
        return Err(PcaError::ZeroTarget);
    }
    if target_dim > input {
        return Err(PcaError::TargetTooLarge {
            target: target_dim,
            input,
        });
    }
    if acc.count() <= target_dim {
        return Err(PcaError::InsufficientSamples {
            samples: acc.count(),
            target: target_dim,
        });
    }

    let cov = acc.covariance();
    let sym = DMatrix::from_fn(input, input, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..input).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });

    // Scale includes the squared mean so that rounding noise on constant data counts as zero.
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mean_sq = acc.mean().iter().map(|m| m * m).fold(0.0, f64::max);
    let threshold = RANK_TOLERANCE * top.max(mean_sq);
    let mut components = Array2::zeros((target_dim, input));
    let mut explained_variance = Array1::zeros(target_dim);
    let mut rank_deficient = false;
    for (row, &idx) in order.iter().take(target_dim).enumerate() {
        let value = eig.eigenvalues[idx];
        if value > threshold && value > 0.0 {
            explained_variance[row] = value;
        } else {
            rank_deficient = true;
        }
        let col = eig.eigenvectors.column(idx);
        let sign = col
            .iter()
            .find(|v| v.abs() > 1e-12)
            .map(|v| v.signum())
            .unwrap_or(1.0);
        for j in 0..input {
            components[[row, j]] = sign * col[j];
        }
    }

    Ok(PcaModel {
        mean: acc.mean().to_owned(),
        components,
        explained_variance,
        rank_deficient,
    })
}

/// Projects each row: components . (row - mean).
pub fn project(model: &PcaModel, features: ArrayView2<f64>) -> Result<Array2<f64>, PcaError> {
    if features.ncols() != model.input_dim() {
        return Err(PcaError::DimensionMismatch {
            expected: model.input_dim(),
            actual: features.ncols(),
        });
    }
    let centered = &features - &model.mean;
    Ok(centered.dot(&model.components.t()))
}
