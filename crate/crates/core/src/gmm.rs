//! Diagonal-covariance Gaussian mixture model fitted by EM.
//!
//! All density evaluations happen in log space with per-row max subtraction,
//! so posteriors stay well defined for the widely scaled activations that come
//! out of convolutional layers. E-step rows are evaluated in parallel; every
//! reduction runs in a fixed order so results do not depend on thread count.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kmeans;
use crate::store::{self, StoreError, Tensor};

/// Relative variance floor: fraction of the mean per-dimension data variance.
pub const RELATIVE_VARIANCE_FLOOR: f64 = 1e-4;
/// Absolute lower bound on the floor, for (near-)constant data.
pub const MIN_VARIANCE_FLOOR: f64 = 1e-12;
pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-5;
/// Components whose weight drops below this are reset.
pub const COLLAPSE_WEIGHT: f64 = 1e-8;
pub const DEFAULT_MAX_SAMPLES: usize = 500_000;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("need at least {k} rows to fit {k} components, got {rows}")]
    TooFewRows { rows: usize, k: usize },
    #[error("number of components must be positive")]
    ZeroComponents,
    #[error("data must have at least one column")]
    ZeroDim,
    #[error("expected dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("max_iters must be at least 1")]
    ZeroIterations,
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("non-finite data value")]
    NonFinite,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("model header: {0}")]
    Header(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub weights: Array1<f64>,
    /// K x D
    pub means: Array2<f64>,
    /// K x D diagonal covariances.
    pub variances: Array2<f64>,
}

impl GmmModel {
    pub fn new(
        weights: Array1<f64>,
        means: Array2<f64>,
        variances: Array2<f64>,
    ) -> Result<Self, GmmError> {
        let m = GmmModel {
            weights,
            means,
            variances,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), GmmError> {
        let k = self.weights.len();
        if k == 0 {
            return Err(GmmError::ZeroComponents);
        }
        if self.means.ncols() == 0 {
            return Err(GmmError::ZeroDim);
        }
        if self.means.nrows() != k || self.variances.dim() != self.means.dim() {
            return Err(GmmError::InvalidModel(format!(
                "shapes disagree: {} weights, means {:?}, variances {:?}",
                k,
                self.means.dim(),
                self.variances.dim()
            )));
        }
        if self.weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(GmmError::InvalidModel("weights must be positive".into()));
        }
        let sum: f64 = self.weights.sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(GmmError::InvalidModel(format!("weights sum to {sum}")));
        }
        if self.variances.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(GmmError::InvalidModel("variances must be positive".into()));
        }
        if self.means.iter().any(|v| !v.is_finite()) {
            return Err(GmmError::InvalidModel("non-finite mean".into()));
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Fisher vector length for this model.
    pub fn fv_len(&self) -> usize {
        crate::fisher::fv_len(self.n_components(), self.dim())
    }

    pub fn save(&self, header_path: &Path, info: &GmmFitInfo) -> Result<(), GmmError> {
        let stem = crate::pca::header_stem(header_path);
        let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
        let header = GmmHeader {
            kind: "gmm".into(),
            k: self.n_components(),
            d: self.dim(),
            info: info.clone(),
            weights: format!("{stem}.weights.mlfv"),
            means: format!("{stem}.means.mlfv"),
            variances: format!("{stem}.variances.mlfv"),
        };
        store::write_tensor_file(
            &Tensor::from_vector(&self.weights.to_vec())?,
            &dir.join(&header.weights),
        )?;
        store::write_tensor_file(&Tensor::from_matrix(&self.means)?, &dir.join(&header.means))?;
        store::write_tensor_file(
            &Tensor::from_matrix(&self.variances)?,
            &dir.join(&header.variances),
        )?;
        store::write_atomic(header_path, &serde_json::to_vec_pretty(&header)?)
            .map_err(StoreError::from)?;
        Ok(())
    }

    /// Loads a model; weights are renormalized after the f32 round trip.
    pub fn load(header_path: &Path) -> Result<(Self, GmmFitInfo), GmmError> {
        let bytes = std::fs::read(header_path).map_err(StoreError::from)?;
        let header: GmmHeader = serde_json::from_slice(&bytes)?;
        let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
        let mut weights = store::read_tensor_file(&dir.join(&header.weights))?.to_vector();
        let matrix = |name: &str| -> Result<Array2<f64>, GmmError> {
            let t = store::read_tensor_file(&dir.join(name))?;
            t.to_matrix()
                .ok_or_else(|| GmmError::InvalidModel(format!("{name} is not 2-D")))
        };
        let means = matrix(&header.means)?;
        let variances = matrix(&header.variances)?;
        let total = weights.sum();
        weights.mapv_inplace(|w| w / total);
        let model = GmmModel::new(weights, means, variances)?;
        if model.n_components() != header.k || model.dim() != header.d {
            return Err(GmmError::InvalidModel(
                "header disagrees with tensors".into(),
            ));
        }
        Ok((model, header.info))
    }
}

/// Metadata persisted with a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFitInfo {
    pub seed: u64,
    pub iterations: usize,
    pub variance_floor: f64,
    pub converged: bool,
    pub samples: usize,
}

#[derive(Serialize, Deserialize)]
struct GmmHeader {
    kind: String,
    k: usize,
    d: usize,
    #[serde(flatten)]
    info: GmmFitInfo,
    weights: String,
    means: String,
    variances: String,
}

/// Per-component constants of the log density.
struct LogDensity<'a> {
    model: &'a GmmModel,
    inv_var: Array2<f64>,
    /// log w_i - 0.5 * sum_d log(2 pi var_id)
    offset: Array1<f64>,
}

impl<'a> LogDensity<'a> {
    fn new(model: &'a GmmModel) -> Self {
        let inv_var = model.variances.mapv(|v| 1.0 / v);
        let offset = Array1::from_iter((0..model.n_components()).map(|i| {
            let log_det: f64 = model
                .variances
                .row(i)
                .iter()
                .map(|v| (2.0 * PI * v).ln())
                .sum();
            model.weights[i].ln() - 0.5 * log_det
        }));
        LogDensity {
            model,
            inv_var,
            offset,
        }
    }

    /// Fills `out` with log(w_i u_i(x)) and returns log sum_i w_i u_i(x).
    fn joint(&self, x: ArrayView1<f64>, out: &mut [f64]) -> f64 {
        let means = &self.model.means;
        let mut max = f64::NEG_INFINITY;
        for (i, o) in out.iter_mut().enumerate() {
            let mut q = 0.0;
            for ((&xd, &md), &iv) in x.iter().zip(means.row(i)).zip(self.inv_var.row(i)) {
                let diff = xd - md;
                q += diff * diff * iv;
            }
            *o = self.offset[i] - 0.5 * q;
            max = max.max(*o);
        }
        let s: f64 = out.iter().map(|&l| (l - max).exp()).sum();
        max + s.ln()
    }
}

fn check_dim(model: &GmmModel, d: usize) -> Result<(), GmmError> {
    if d != model.dim() {
        return Err(GmmError::DimensionMismatch {
            expected: model.dim(),
            actual: d,
        });
    }
    Ok(())
}

/// Responsibilities gamma_i(x) of every component for one observation.
pub fn posteriors(model: &GmmModel, x: ArrayView1<f64>) -> Result<Array1<f64>, GmmError> {
    check_dim(model, x.len())?;
    let dens = LogDensity::new(model);
    let mut logs = vec![0.0; model.n_components()];
    let lse = dens.joint(x, &mut logs);
    Ok(logs.into_iter().map(|l| (l - lse).exp()).collect())
}

/// Responsibilities for every row, computed in parallel. Returns (T x K, per-row log density).
pub fn posteriors_batch(
    model: &GmmModel,
    data: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array1<f64>), GmmError> {
    check_dim(model, data.ncols())?;
    let dens = LogDensity::new(model);
    let k = model.n_components();
    let mut resp = Array2::<f64>::zeros((data.nrows(), k));
    let mut row_ll = Array1::<f64>::zeros(data.nrows());
    resp.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(row_ll.axis_iter_mut(Axis(0)).into_par_iter())
        .zip(data.axis_iter(Axis(0)).into_par_iter())
        .for_each(|((mut r, mut ll), x)| {
            let mut logs = vec![0.0; k];
            let lse = dens.joint(x, &mut logs);
            for (ri, l) in r.iter_mut().zip(&logs) {
                *ri = (l - lse).exp();
            }
            ll.fill(lse);
        });
    Ok((resp, row_ll))
}

/// Total log-likelihood sum_t log sum_i w_i u_i(x_t).
pub fn log_likelihood(model: &GmmModel, data: ArrayView2<f64>) -> Result<f64, GmmError> {
    let (_, row_ll) = posteriors_batch(model, data)?;
    Ok(row_ll.iter().sum())
}

/// Relative floor derived from the data's per-dimension variances.
pub fn variance_floor(data: ArrayView2<f64>) -> f64 {
    let m = data.nrows() as f64;
    if data.nrows() == 0 {
        return MIN_VARIANCE_FLOOR;
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let mut var = Array1::<f64>::zeros(data.ncols());
    for x in data.outer_iter() {
        for (j, (&xj, &mj)) in x.iter().zip(mean.iter()).enumerate() {
            var[j] += (xj - mj) * (xj - mj);
        }
    }
    let mean_var = var.sum() / (m * data.ncols() as f64);
    (RELATIVE_VARIANCE_FLOOR * mean_var).max(MIN_VARIANCE_FLOOR)
}

fn check_data(data: ArrayView2<f64>, k: usize) -> Result<(), GmmError> {
    if k == 0 {
        return Err(GmmError::ZeroComponents);
    }
    if data.ncols() == 0 {
        return Err(GmmError::ZeroDim);
    }
    if data.nrows() < k {
        return Err(GmmError::TooFewRows {
            rows: data.nrows(),
            k,
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(GmmError::NonFinite);
    }
    Ok(())
}

/// K-means based initial model.
pub fn init_kmeans(data: ArrayView2<f64>, k: usize, seed: u64) -> Result<GmmModel, GmmError> {
    check_data(data, k)?;
    let floor = variance_floor(data);
    let km = kmeans::kmeans(data, k, seed);
    let (mut variances, counts) = kmeans::cluster_variances(data, &km.centers, &km.labels);
    variances.mapv_inplace(|v| v.max(floor));
    let m = data.nrows() as f64;
    let min_w = 1.0 / (10.0 * k as f64);
    let mut weights = counts.mapv(|c| (c / m).max(min_w));
    let total = weights.sum();
    weights.mapv_inplace(|w| w / total);
    GmmModel::new(weights, km.centers, variances)
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmEvent {
    /// Component collapsed and was re-seeded from the heaviest component.
    ComponentReset { iteration: usize, component: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmTrace {
    /// Average log-likelihood: entry 0 for the initial model, entry i after the i-th M-step.
    pub avg_loglik: Vec<f64>,
    pub events: Vec<EmEvent>,
    pub iterations: usize,
    pub converged: bool,
    pub variance_floor: f64,
}

impl EmTrace {
    /// Iterations whose M-step included a component reset.
    pub fn reset_iterations(&self) -> Vec<usize> {
        self.events
            .iter()
            .map(|EmEvent::ComponentReset { iteration, .. }| *iteration)
            .collect()
    }
}

fn m_step(
    data: ArrayView2<f64>,
    resp: &Array2<f64>,
    floor: f64,
    iteration: usize,
    events: &mut Vec<EmEvent>,
) -> GmmModel {
    let (m, d) = data.dim();
    let k = resp.ncols();
    let per_component: Vec<(f64, Array1<f64>, Array1<f64>)> = (0..k)
        .into_par_iter()
        .map(|i| {
            let r = resp.column(i);
            let nk: f64 = r.iter().sum();
            let mut mean = Array1::<f64>::zeros(d);
            if nk > 0.0 {
                for (x, &g) in data.outer_iter().zip(r.iter()) {
                    mean.scaled_add(g, &x);
                }
                mean /= nk;
            }
            let mut var = Array1::<f64>::zeros(d);
            if nk > 0.0 {
                for (x, &g) in data.outer_iter().zip(r.iter()) {
                    for j in 0..d {
                        let diff = x[j] - mean[j];
                        var[j] += g * diff * diff;
                    }
                }
                var /= nk;
            }
            var.mapv_inplace(|v| v.max(floor));
            (nk, mean, var)
        })
        .collect();

    let mut weights = Array1::<f64>::zeros(k);
    let mut means = Array2::<f64>::zeros((k, d));
    let mut variances = Array2::<f64>::zeros((k, d));
    for (i, (nk, mean, var)) in per_component.into_iter().enumerate() {
        weights[i] = nk / m as f64;
        means.row_mut(i).assign(&mean);
        variances.row_mut(i).assign(&var);
    }

    for i in 0..k {
        if weights[i] >= COLLAPSE_WEIGHT && weights[i].is_finite() {
            continue;
        }
        let heaviest = (0..k)
            .max_by(|&a, &b| {
                weights[a]
                    .partial_cmp(&weights[b])
                    .expect("finite")
                    .then(b.cmp(&a))
            })
            .expect("k >= 1");
        let half = weights[heaviest] / 2.0;
        weights[heaviest] = half;
        weights[i] = half;
        let src_mean = means.row(heaviest).to_owned();
        let src_var = variances.row(heaviest).to_owned();
        for j in 0..d {
            let shift = 0.1 * src_var[j].sqrt() * if j % 2 == 0 { 1.0 } else { -1.0 };
            means[[i, j]] = src_mean[j] + shift;
            means[[heaviest, j]] = src_mean[j] - shift;
        }
        variances.row_mut(i).assign(&src_var);
        log::debug!("EM iteration {iteration}: component {i} collapsed, reset from {heaviest}");
        events.push(EmEvent::ComponentReset {
            iteration,
            component: i,
        });
    }
    let total = weights.sum();
    weights.mapv_inplace(|w| w / total);
    GmmModel {
        weights,
        means,
        variances,
    }
}

/// EM from `init` until the average log-likelihood improves by less than `tol`
/// or `max_iters` M-steps have run.
pub fn em_fit(
    data: ArrayView2<f64>,
    init: &GmmModel,
    max_iters: usize,
    tol: f64,
) -> Result<(GmmModel, EmTrace), GmmError> {
    if max_iters == 0 {
        return Err(GmmError::ZeroIterations);
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(GmmError::BadTolerance(tol));
    }
    init.validate()?;
    check_data(data, init.n_components())?;
    check_dim(init, data.ncols())?;

    let floor = variance_floor(data);
    let m = data.nrows() as f64;
    let mut model = init.clone();
    let (mut resp, row_ll) = posteriors_batch(&model, data)?;
    let mut trace = EmTrace {
        avg_loglik: vec![row_ll.iter().sum::<f64>() / m],
        events: Vec::new(),
        iterations: 0,
        converged: false,
        variance_floor: floor,
    };
    for iteration in 1..=max_iters {
        model = m_step(data, &resp, floor, iteration, &mut trace.events);
        let (r, row_ll) = posteriors_batch(&model, data)?;
        resp = r;
        let ll = row_ll.iter().sum::<f64>() / m;
        let prev = *trace.avg_loglik.last().expect("non-empty");
        trace.avg_loglik.push(ll);
        trace.iterations = iteration;
        if ll - prev < tol {
            trace.converged = true;
            break;
        }
    }
    Ok((model, trace))
}

#[derive(Clone, Copy, Debug)]
pub struct GmmOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// k-means initialization followed by EM.
pub fn fit(
    data: ArrayView2<f64>,
    k: usize,
    seed: u64,
    opts: GmmOptions,
) -> Result<(GmmModel, EmTrace, GmmFitInfo), GmmError> {
    let init = init_kmeans(data, k, seed)?;
    let (model, trace) = em_fit(data, &init, opts.max_iters, opts.tol)?;
    let info = GmmFitInfo {
        seed,
        iterations: trace.iterations,
        variance_floor: trace.variance_floor,
        converged: trace.converged,
        samples: data.nrows(),
    };
    Ok((model, trace, info))
}
