//! Independent reference implementations used by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use texfisher::GmmModel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Sample covariance with the n - 1 denominator, by explicit loops.
pub fn sample_covariance(data: &Array2<f64>) -> Vec<Vec<f64>> {
    let (n, d) = data.dim();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            mean[j] += data[[r, j]];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (data[[r, a]] - mean[a]) * (data[[r, b]] - mean[b]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    cov
}

/// Cyclic Jacobi eigendecomposition. Returns eigenvalues in descending order
/// and the matching unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).unwrap());
    let vals = order.iter().map(|&i| m[i][i]).collect();
    let vecs = order
        .iter()
        .map(|&i| (0..n).map(|r| v[r][i]).collect())
        .collect();
    (vals, vecs)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Average log-likelihood of a diagonal GMM, written out directly.
pub fn avg_loglik(
    weights: &[f64],
    means: &Array2<f64>,
    sigmas: &Array2<f64>,
    x: &Array2<f64>,
) -> f64 {
    let (t, d) = x.dim();
    let k = weights.len();
    let mut total = 0.0;
    for r in 0..t {
        let logs: Vec<f64> = (0..k)
            .map(|i| {
                let mut l = weights[i].ln();
                for j in 0..d {
                    let z = (x[[r, j]] - means[[i, j]]) / sigmas[[i, j]];
                    l += -0.5 * z * z
                        - sigmas[[i, j]].ln()
                        - 0.5 * (2.0 * std::f64::consts::PI).ln();
                }
                l
            })
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    }
    total / t as f64
}

/// Normalized gradient of the average log-likelihood by central differences,
/// laid out as [weights | means | sigmas]. Weights are parameterized by a
/// softmax over unconstrained logits.
pub fn finite_difference_fisher(model: &GmmModel, x: &Array2<f64>, h: f64) -> Vec<f64> {
    let k = model.n_components();
    let d = model.dim();
    let w: Vec<f64> = model.weights.to_vec();
    let means = model.means.clone();
    let sigmas = model.variances.mapv(f64::sqrt);
    let logits: Vec<f64> = w.iter().map(|v| v.ln()).collect();
    let softmax = |a: &[f64]| -> Vec<f64> {
        let mx = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = a.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    let mut out = vec![0.0; k * (2 * d + 1)];
    for i in 0..k {
        let mut plus = logits.clone();
        let mut minus = logits.clone();
        plus[i] += h;
        minus[i] -= h;
        let g = (avg_loglik(&softmax(&plus), &means, &sigmas, x)
            - avg_loglik(&softmax(&minus), &means, &sigmas, x))
            / (2.0 * h);
        out[i] = g / w[i].sqrt();
    }
    for i in 0..k {
        for j in 0..d {
            let mut mp = means.clone();
            let mut mm = means.clone();
            mp[[i, j]] += h;
            mm[[i, j]] -= h;
            let g = (avg_loglik(&w, &mp, &sigmas, x) - avg_loglik(&w, &mm, &sigmas, x)) / (2.0 * h);
            out[k + i * d + j] = g * sigmas[[i, j]] / w[i].sqrt();

            let mut sp = sigmas.clone();
            let mut sm = sigmas.clone();
            sp[[i, j]] += h;
            sm[[i, j]] -= h;
            let g = (avg_loglik(&w, &means, &sp, x) - avg_loglik(&w, &means, &sm, x)) / (2.0 * h);
            out[k + k * d + i * d + j] = g * sigmas[[i, j]] / (2.0 * w[i]).sqrt();
        }
    }
    out
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

pub fn random_gmm(k: usize, d: usize, rng: &mut ChaCha8Rng) -> GmmModel {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let s: f64 = raw.iter().sum();
    let weights = Array1::from_iter(raw.into_iter().map(|v| v / s));
    let means = Array2::from_shape_fn((k, d), |_| rng.random_range(-2.0..2.0));
    let variances = Array2::from_shape_fn((k, d), |_| rng.random_range(0.5..2.0));
    GmmModel::new(weights, means, variances).unwrap()
}

/// Isotropic Gaussian blobs whose centers are pairwise `spacing` apart
/// (scaled simplex vertices). Returns (features, labels) in class-major order.
pub fn blobs(
    classes: usize,
    per_class: usize,
    spacing: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Vec<usize>) {
    let dim = classes;
    let scale = spacing / std::f64::consts::SQRT_2;
    let mut x = Array2::zeros((classes * per_class, dim));
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for i in 0..per_class {
            let r = c * per_class + i;
            for j in 0..dim {
                let center = if j == c { scale } else { 0.0 };
                x[[r, j]] = center + rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c);
        }
    }
    (x, labels)
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("c{c}")).collect()
}
