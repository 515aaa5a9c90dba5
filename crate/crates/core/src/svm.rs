//! One-vs-rest linear SVM trained by dual coordinate descent on the hinge loss,
//! and the score-sum fusion of two such classifiers.
//!
//! Each binary problem solves
//!
//! ```text
//! min_a  1/2 a^T Q a - sum_i a_i,   0 <= a_i <= C,   Q_ij = y_i y_j <x_i, x_j>
//! ```
//!
//! with the bias folded in as a constant-1 feature. Coordinates are visited in
//! a freshly shuffled (seeded) order each epoch and every update is the exact
//! box-constrained minimizer along that coordinate.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{self, StoreError, Tensor};

pub const DEFAULT_COST: f64 = 1.0;
pub const STOP_VIOLATION: f64 = 1e-3;
pub const MAX_EPOCHS: usize = 1000;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training needs at least two classes")]
    SingleClass,
    #[error("training needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("{labels} labels for {rows} feature rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("label index {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("non-finite feature value in row {0}")]
    NonFinite(usize),
    #[error("cost must be positive and finite, got {0}")]
    BadCost(f64),
    #[error("expected dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("class count mismatch: {fc} vs {fv}")]
    ClassCountMismatch { fc: usize, fv: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("model header: {0}")]
    Header(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryStats {
    pub epochs: usize,
    pub max_violation: f64,
    pub converged: bool,
    /// Dual objective 1/2 |w|^2 - sum a after each epoch.
    #[serde(skip)]
    pub dual_objective: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BinarySolution {
    /// P + 1 weights, bias last.
    pub weights: Array1<f64>,
    pub alpha: Array1<f64>,
    pub stats: BinaryStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub class_names: Vec<String>,
    /// C x (P + 1), bias in the last column.
    pub weights: Array2<f64>,
    pub cost: f64,
    pub stats: Vec<BinaryStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionScores {
    pub per_class: Vec<f64>,
}

impl SvmModel {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Feature dimension P, without the bias coordinate.
    pub fn dim(&self) -> usize {
        self.weights.ncols() - 1
    }

    pub fn save(&self, header_path: &Path) -> Result<(), SvmError> {
        let stem = crate::pca::header_stem(header_path);
        let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
        let header = SvmHeader {
            kind: "svm".into(),
            class_names: self.class_names.clone(),
            cost: self.cost,
            dim: self.dim(),
            stats: self.stats.clone(),
            weights: format!("{stem}.weights.mlfv"),
        };
        store::write_tensor_file(
            &Tensor::from_matrix(&self.weights)?,
            &dir.join(&header.weights),
        )?;
        store::write_atomic(header_path, &serde_json::to_vec_pretty(&header)?)
            .map_err(StoreError::from)?;
        Ok(())
    }

    pub fn load(header_path: &Path) -> Result<Self, SvmError> {
        let bytes = std::fs::read(header_path).map_err(StoreError::from)?;
        let header: SvmHeader = serde_json::from_slice(&bytes)?;
        let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
        let t = store::read_tensor_file(&dir.join(&header.weights))?;
        let weights = t.to_matrix().ok_or(SvmError::DimensionMismatch {
            expected: 2,
            actual: t.shape().len(),
        })?;
        if weights.dim() != (header.class_names.len(), header.dim + 1) {
            return Err(SvmError::DimensionMismatch {
                expected: header.dim + 1,
                actual: weights.ncols(),
            });
        }
        Ok(SvmModel {
            class_names: header.class_names,
            weights,
            cost: header.cost,
            stats: header.stats,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SvmHeader {
    kind: String,
    class_names: Vec<String>,
    cost: f64,
    dim: usize,
    stats: Vec<BinaryStats>,
    weights: String,
}

fn check_rows(features: ArrayView2<f64>) -> Result<(), SvmError> {
    for (i, row) in features.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SvmError::NonFinite(i));
        }
    }
    Ok(())
}

fn augmented_dot(w: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
    let p = x.len();
    w.iter()
        .take(p)
        .zip(x.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        + w[p]
}

/// Binary hinge-loss SVM with targets `y` in {-1, +1}.
pub fn train_binary(
    features: ArrayView2<f64>,
    y: &[f64],
    cost: f64,
    seed: u64,
) -> Result<BinarySolution, SvmError> {
    let (m, p) = features.dim();
    if y.len() != m {
        return Err(SvmError::LabelCount {
            labels: y.len(),
            rows: m,
        });
    }
    if !(cost > 0.0 && cost.is_finite()) {
        return Err(SvmError::BadCost(cost));
    }
    check_rows(features)?;

    let q_diag: Vec<f64> = features.outer_iter().map(|x| x.dot(&x) + 1.0).collect();
    let mut w = Array1::<f64>::zeros(p + 1);
    let mut alpha = Array1::<f64>::zeros(m);
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = BinaryStats {
        epochs: 0,
        max_violation: f64::INFINITY,
        converged: false,
        dual_objective: Vec::new(),
    };

    for epoch in 1..=MAX_EPOCHS {
        order.shuffle(&mut rng);
        let mut max_violation = 0.0f64;
        for &i in &order {
            let x = features.row(i);
            let g = y[i] * augmented_dot(w.view(), x) - 1.0;
            let a = alpha[i];
            let pg = if a <= 0.0 {
                g.min(0.0)
            } else if a >= cost {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg.abs() > 1e-12 {
                let new_a = (a - g / q_diag[i]).clamp(0.0, cost);
                let step = (new_a - a) * y[i];
                alpha[i] = new_a;
                for (wj, &xj) in w.iter_mut().zip(x.iter()) {
                    *wj += step * xj;
                }
                w[p] += step;
            }
        }
        stats.epochs = epoch;
        stats.max_violation = max_violation;
        stats.dual_objective.push(0.5 * w.dot(&w) - alpha.sum());
        if max_violation < STOP_VIOLATION {
            stats.converged = true;
            break;
        }
    }
    if !stats.converged {
        log::warn!(
            "SVM did not converge in {MAX_EPOCHS} epochs (violation {:.3e})",
            stats.max_violation
        );
    }
    Ok(BinarySolution {
        weights: w,
        alpha,
        stats,
    })
}

/// One-vs-rest training. `labels[i]` indexes into `class_names`.
pub fn train_ovr(
    features: ArrayView2<f64>,
    labels: &[usize],
    class_names: &[String],
    cost: f64,
    seed: u64,
) -> Result<SvmModel, SvmError> {
    let (m, p) = features.dim();
    if labels.len() != m {
        return Err(SvmError::LabelCount {
            labels: labels.len(),
            rows: m,
        });
    }
    if m < 2 {
        return Err(SvmError::TooFewSamples(m));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
        return Err(SvmError::LabelRange {
            label: bad,
            classes: class_names.len(),
        });
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(SvmError::SingleClass);
    }
    if !(cost > 0.0 && cost.is_finite()) {
        return Err(SvmError::BadCost(cost));
    }
    check_rows(features)?;

    let solutions: Vec<BinarySolution> = (0..class_names.len())
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = labels
                .iter()
                .map(|&l| if l == c { 1.0 } else { -1.0 })
                .collect();
            train_binary(features, &y, cost, crate::mix_seed(seed, c as u64))
        })
        .collect::<Result<_, _>>()?;

    let mut weights = Array2::<f64>::zeros((class_names.len(), p + 1));
    let mut stats = Vec::with_capacity(solutions.len());
    for (c, sol) in solutions.into_iter().enumerate() {
        weights.row_mut(c).assign(&sol.weights);
        stats.push(sol.stats);
    }
    Ok(SvmModel {
        class_names: class_names.to_vec(),
        weights,
        cost,
        stats,
    })
}

pub fn decision_values(model: &SvmModel, x: &[f64]) -> Result<DecisionScores, SvmError> {
    if x.len() != model.dim() {
        return Err(SvmError::DimensionMismatch {
            expected: model.dim(),
            actual: x.len(),
        });
    }
    let xv = ArrayView1::from(x);
    let per_class = model
        .weights
        .outer_iter()
        .map(|w| augmented_dot(w, xv))
        .collect();
    Ok(DecisionScores { per_class })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &SvmModel, x: &[f64]) -> Result<usize, SvmError> {
    Ok(argmax(&decision_values(model, x)?.per_class))
}

pub fn predict_label<'m>(model: &'m SvmModel, x: &[f64]) -> Result<&'m str, SvmError> {
    Ok(&model.class_names[predict(model, x)?])
}

/// Class maximizing the sum of the two classifiers' decision values.
pub fn fuse_predict(fc: &DecisionScores, fv: &DecisionScores) -> Result<usize, SvmError> {
    if fc.per_class.len() != fv.per_class.len() {
        return Err(SvmError::ClassCountMismatch {
            fc: fc.per_class.len(),
            fv: fv.per_class.len(),
        });
    }
    let sums: Vec<f64> = fc
        .per_class
        .iter()
        .zip(&fv.per_class)
        .map(|(a, b)| a + b)
        .collect();
    Ok(argmax(&sums))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn scores(v: &[f64]) -> DecisionScores {
        DecisionScores {
            per_class: v.to_vec(),
        }
    }

    #[test]
    fn one_dimensional_two_class() {
        let x = array![[-1.0], [1.0]];
        let model = train_ovr(x.view(), &[0, 1], &names(2), 1.0, 0).unwrap();
        assert_eq!(predict(&model, &[-1.0]).unwrap(), 0);
        assert_eq!(predict(&model, &[1.0]).unwrap(), 1);
    }

    #[test]
    fn rejects_single_class_and_nan() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(
            train_ovr(x.view(), &[1, 1], &names(2), 1.0, 0),
            Err(SvmError::SingleClass)
        ));
        let x = array![[0.0], [f64::NAN]];
        assert!(matches!(
            train_ovr(x.view(), &[0, 1], &names(2), 1.0, 0),
            Err(SvmError::NonFinite(1))
        ));
    }

    #[test]
    fn decision_value_examples() {
        let zero = SvmModel {
            class_names: names(3),
            weights: Array2::zeros((3, 3)),
            cost: 1.0,
            stats: vec![],
        };
        assert_eq!(
            decision_values(&zero, &[1.0, 2.0]).unwrap().per_class,
            vec![0.0; 3]
        );

        let model = SvmModel {
            class_names: names(2),
            weights: array![[1.0, -2.0, 0.5], [0.25, 3.0, -1.0]],
            cost: 1.0,
            stats: vec![],
        };
        assert_eq!(
            decision_values(&model, &[0.0, 0.0]).unwrap().per_class,
            vec![0.5, -1.0]
        );
        let x = [0.7, -1.3];
        let x2 = [1.4, -2.6];
        let s1 = decision_values(&model, &x).unwrap().per_class;
        let s2 = decision_values(&model, &x2).unwrap().per_class;
        for (c, bias) in [0.5, -1.0].iter().enumerate() {
            assert!(((s2[c] - bias) - 2.0 * (s1[c] - bias)).abs() < 1e-12);
        }
        assert!(matches!(
            decision_values(&model, &[1.0]),
            Err(SvmError::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn argmax_ties_and_order() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[-3.0, 100.0, -2.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0, -2.0, -3.0, 100.0]), 3);
    }

    #[test]
    fn fusion_examples() {
        assert_eq!(
            fuse_predict(&scores(&[0.2, 0.8]), &scores(&[0.5, 0.3])).unwrap(),
            1
        );
        let fc = scores(&[0.3, -0.1, 0.9]);
        assert_eq!(
            fuse_predict(&fc, &scores(&[0.0; 3])).unwrap(),
            argmax(&fc.per_class)
        );
        assert_eq!(fuse_predict(&fc, &fc).unwrap(), argmax(&fc.per_class));
        assert!(matches!(
            fuse_predict(&fc, &scores(&[1.0])),
            Err(SvmError::ClassCountMismatch { fc: 3, fv: 1 })
        ));
    }
}
