//! Seeded k-means (k-means++ seeding + Lloyd iterations), used to initialize EM.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const MAX_LLOYD_ITERS: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Array2<f64>,
    pub labels: Vec<usize>,
    pub iterations: usize,
}

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.outer_iter().enumerate() {
        let d = sq_dist(x, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeding(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let m = data.nrows();
    let mut centers = Array2::zeros((k, data.ncols()));
    let first = rng.random_range(0..m);
    centers.row_mut(0).assign(&data.row(first));
    let mut min_d: Vec<f64> = data
        .outer_iter()
        .map(|x| sq_dist(x, data.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centers.row_mut(c).assign(&data.row(pick));
        let new_center = data.row(pick);
        min_d
            .par_iter_mut()
            .zip(data.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(d, x)| *d = d.min(sq_dist(x, new_center)));
    }
    centers
}

/// Gives every empty cluster the point of the largest cluster farthest from its center.
fn fill_empty_clusters(
    data: ArrayView2<f64>,
    centers: &Array2<f64>,
    labels: &mut [usize],
    k: usize,
) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut taken = vec![false; labels.len()];
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let largest = (0..k)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("k >= 1");
        if counts[largest] < 2 {
            break;
        }
        let far = (0..labels.len())
            .filter(|&i| labels[i] == largest && !taken[i])
            .max_by(|&a, &b| {
                let da = sq_dist(data.row(a), centers.row(largest));
                let db = sq_dist(data.row(b), centers.row(largest));
                da.partial_cmp(&db).expect("finite").then(b.cmp(&a))
            })
            .expect("largest cluster non-empty");
        labels[far] = empty;
        taken[far] = true;
        counts[largest] -= 1;
        counts[empty] += 1;
    }
}

fn recompute_centers(data: ArrayView2<f64>, labels: &[usize], k: usize) -> Array2<f64> {
    let d = data.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (x, &l) in data.outer_iter().zip(labels) {
        let mut row = sums.row_mut(l);
        row += &x;
        counts[l] += 1;
    }
    for (mut row, &n) in sums.outer_iter_mut().zip(&counts) {
        if n > 0 {
            row /= n as f64;
        }
    }
    sums
}

/// Runs k-means with at most `MAX_LLOYD_ITERS` Lloyd iterations. Requires `data.nrows() >= k >= 1`.
pub fn kmeans(data: ArrayView2<f64>, k: usize, seed: u64) -> KMeansResult {
    assert!(k >= 1 && data.nrows() >= k, "kmeans needs at least k rows");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seeding(data, k, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; data.nrows()];
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD_ITERS {
        iterations += 1;
        let assigned: Vec<(usize, f64)> = data
            .axis_iter(Axis(0))
            .into_par_iter()
            .map(|x| nearest(x, &centers))
            .collect();
        let mut new_labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        fill_empty_clusters(data, &centers, &mut new_labels, k);
        let changed = new_labels != labels;
        labels = new_labels;
        centers = recompute_centers(data, &labels, k);
        if !changed {
            break;
        }
    }
    KMeansResult {
        centers,
        labels,
        iterations,
    }
}

/// Per-cluster, per-dimension biased scatter around the given centers.
pub(crate) fn cluster_variances(
    data: ArrayView2<f64>,
    centers: &Array2<f64>,
    labels: &[usize],
) -> (Array2<f64>, Array1<f64>) {
    let (k, d) = centers.dim();
    let mut var = Array2::<f64>::zeros((k, d));
    let mut counts = Array1::<f64>::zeros(k);
    for (x, &l) in data.outer_iter().zip(labels) {
        counts[l] += 1.0;
        for j in 0..d {
            let diff = x[j] - centers[[l, j]];
            var[[l, j]] += diff * diff;
        }
    }
    for c in 0..k {
        if counts[c] > 0.0 {
            let n = counts[c];
            var.row_mut(c).mapv_inplace(|v| v / n);
        }
    }
    (var, counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_points_do_not_leave_empty_clusters() {
        let data = Array2::from_shape_fn((6, 2), |(i, _)| if i < 5 { 1.0 } else { 2.0 });
        let r = kmeans(data.view(), 3, 1);
        let mut counts = [0; 3];
        for &l in &r.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn deterministic() {
        let data = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 13 + j * 7) % 17) as f64);
        assert_eq!(kmeans(data.view(), 4, 9), kmeans(data.view(), 4, 9));
    }
}
