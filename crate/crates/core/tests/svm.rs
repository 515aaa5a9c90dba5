mod common;

use common::{blobs, class_names, rng};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use texfisher::svm::{self, DecisionScores};

fn accuracy(model: &texfisher::SvmModel, x: &Array2<f64>, labels: &[usize]) -> f64 {
    let hits = x
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| svm::predict(model, row.as_slice().unwrap()).unwrap() == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[test]
fn separates_three_blobs() {
    let mut r = rng(1);
    let (train, train_y) = blobs(3, 50, 10.0, &mut r);
    let (test, test_y) = blobs(3, 50, 10.0, &mut r);
    let model = svm::train_ovr(train.view(), &train_y, &class_names(3), 10.0, 0).unwrap();
    assert_eq!(accuracy(&model, &train, &train_y), 1.0);
    assert!(accuracy(&model, &test, &test_y) >= 0.98);
    assert!(model.stats.iter().all(|s| s.converged));
}

#[test]
fn same_seed_same_weights() {
    let mut r = rng(2);
    let (x, y) = blobs(4, 20, 4.0, &mut r);
    let a = svm::train_ovr(x.view(), &y, &class_names(4), 1.0, 9).unwrap();
    let b = svm::train_ovr(x.view(), &y, &class_names(4), 1.0, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn solution_satisfies_kkt_conditions() {
    let mut r = rng(3);
    let (x, labels) = blobs(2, 40, 2.0, &mut r);
    let y: Vec<f64> = labels
        .iter()
        .map(|&l| if l == 0 { 1.0 } else { -1.0 })
        .collect();
    let cost = 0.5;
    let sol = svm::train_binary(x.view(), &y, cost, 4).unwrap();
    assert!(sol.stats.converged);
    let p = x.ncols();
    // Weights equal sum_i alpha_i y_i [x_i, 1].
    let mut w = vec![0.0; p + 1];
    for (i, row) in x.outer_iter().enumerate() {
        for j in 0..p {
            w[j] += sol.alpha[i] * y[i] * row[j];
        }
        w[p] += sol.alpha[i] * y[i];
    }
    for (a, b) in w.iter().zip(sol.weights.iter()) {
        assert!((a - b).abs() < 1e-9);
    }
    for (i, row) in x.outer_iter().enumerate() {
        let a = sol.alpha[i];
        assert!((0.0..=cost).contains(&a));
        let margin = y[i] * (row.iter().zip(&w).map(|(u, v)| u * v).sum::<f64>() + w[p]);
        let g = margin - 1.0;
        let pg = if a <= 0.0 {
            g.min(0.0)
        } else if a >= cost {
            g.max(0.0)
        } else {
            g
        };
        assert!(pg.abs() < 1e-3 + 1e-9, "row {i}: projected gradient {pg}");
    }
}

#[test]
fn row_order_does_not_change_predictions() {
    let mut r = rng(5);
    let (x, y) = blobs(3, 30, 6.0, &mut r);
    let (test, _) = blobs(3, 30, 6.0, &mut r);
    let perm: Vec<usize> = (0..x.nrows()).rev().collect();
    let xp = x.select(Axis(0), &perm);
    let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
    let a = svm::train_ovr(x.view(), &y, &class_names(3), 1.0, 0).unwrap();
    let b = svm::train_ovr(xp.view(), &yp, &class_names(3), 1.0, 0).unwrap();
    for row in test.outer_iter() {
        let row = row.as_slice().unwrap();
        assert_eq!(
            svm::predict(&a, row).unwrap(),
            svm::predict(&b, row).unwrap()
        );
    }
}

#[test]
fn ties_go_to_the_lowest_index() {
    assert_eq!(svm::argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    let fc = DecisionScores {
        per_class: vec![1.0, 0.0, 2.0],
    };
    let fv = DecisionScores {
        per_class: vec![1.0, 2.0, 0.0],
    };
    assert_eq!(svm::fuse_predict(&fc, &fv).unwrap(), 0);
}

#[test]
fn save_and_load_roundtrip() {
    let mut r = rng(6);
    let (x, y) = blobs(3, 10, 5.0, &mut r);
    let model = svm::train_ovr(x.view(), &y, &class_names(3), 1.0, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("svm.json");
    model.save(&path).unwrap();
    let back = texfisher::SvmModel::load(&path).unwrap();
    assert_eq!(back.class_names, model.class_names);
    assert_eq!(back.dim(), model.dim());
    for row in x.outer_iter() {
        let row = row.as_slice().unwrap();
        assert_eq!(
            svm::predict_label(&back, row).unwrap(),
            svm::predict_label(&model, row).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dual_objective_never_increases(seed in any::<u64>(), cost in 0.05f64..20.0) {
        let mut r = rng(seed);
        let (x, labels) = blobs(2, 15, 1.5, &mut r);
        let y: Vec<f64> = labels.iter().map(|&l| if l == 0 { 1.0 } else { -1.0 }).collect();
        let sol = svm::train_binary(x.view(), &y, cost, seed).unwrap();
        prop_assert!(sol.alpha.iter().all(|&a| (0.0..=cost).contains(&a)));
        for w in sol.stats.dual_objective.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10, "{} -> {}", w[0], w[1]);
        }
    }
}
