//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    blobs, class_names, dot, finite_difference_fisher, gaussian_matrix, jacobi_eigen, max_rel_err,
    random_gmm, rng, sample_covariance,
};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use texfisher::experiment::{self, emit_report, ReportFormat};
use texfisher::fisher::{self, MergedFeatureSet};
use texfisher::gmm::{self, GmmModel, GmmOptions};
use texfisher::synthetic::{self, SyntheticSpec};
use texfisher::transform::{bhattacharyya_kernel, phi_map, prepare_descriptor, DescriptorKind};
use texfisher::{pca, svm, ExperimentConfig, Mode, Protocol};

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    check(took < limit, format!("took {took:.2?}, limit {limit:?}"))
}

fn fisher_gradient() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(seed);
        let model = random_gmm(3, 4, &mut r);
        let x = gaussian_matrix(20, 4, &mut r) * 1.5;
        let set = MergedFeatureSet {
            features: x.clone(),
            source_counts: (20, 0),
        };
        let fv = fisher::encode_fv(&model, &set).map_err(|e| e.to_string())?;
        let oracle = finite_difference_fisher(&model, &x, 1e-5);
        worst = worst.max(max_rel_err(&fv.values, &oracle));
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e}"))?;
    within(Duration::from_secs(1), started)?;
    Ok(format!("max relative error {worst:.2e} over 10 models"))
}

fn em_monotone() -> Outcome {
    let started = Instant::now();
    let mut steps = 0;
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let shift: f64 = r.random_range(1.0..4.0);
        let mut data = gaussian_matrix(200, 2, &mut r);
        for mut row in data.slice_mut(ndarray::s![..100, ..]).outer_iter_mut() {
            row[0] += shift;
        }
        let (_, trace, _) =
            gmm::fit(data.view(), 2, seed, GmmOptions::default()).map_err(|e| e.to_string())?;
        let resets = trace.reset_iterations();
        for (i, w) in trace.avg_loglik.windows(2).enumerate() {
            if resets.contains(&(i + 1)) {
                continue;
            }
            check(
                w[1] >= w[0] - 1e-8,
                format!("run {seed}, iteration {}: {} -> {}", i + 1, w[0], w[1]),
            )?;
            steps += 1;
        }
    }
    within(Duration::from_secs(30), started)?;
    Ok(format!("100 runs, {steps} EM steps, none decreased"))
}

fn kernel_identity() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = r.random_range(1..64);
        let x: Vec<f64> = (0..len).map(|_| r.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = (0..len).map(|_| r.random_range(-10.0..10.0)).collect();
        let k = bhattacharyya_kernel(&x, &y).map_err(|e| e.to_string())?;
        let inner = dot(&phi_map(&x), &phi_map(&y));
        let scale: f64 = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a * b).abs().sqrt())
            .sum::<f64>()
            .max(1.0);
        worst = worst.max((k - inner).abs() / scale);
    }
    check(worst < 1e-12, format!("max deviation {worst:.2e}"))?;
    Ok(format!("1000 pairs, max relative deviation {worst:.2e}"))
}

fn normalization() -> Outcome {
    let mut r = rng(4);
    let mut worst_norm = 0.0f64;
    let mut worst_scale = 0.0f64;
    for _ in 0..200 {
        let v: Vec<f64> = (0..50).map(|_| r.random_range(-5.0..5.0)).collect();
        let base = prepare_descriptor(&v, DescriptorKind::Fv);
        let unit: f64 = base.values.iter().map(|x| x.powi(4)).sum();
        worst_norm = worst_norm.max((unit.sqrt() - 1.0).abs());
        for alpha in [0.1, 7.3] {
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            let d = prepare_descriptor(&scaled, DescriptorKind::Fv);
            for (a, b) in d.values.iter().zip(&base.values) {
                worst_scale = worst_scale.max((a - b).abs());
            }
        }
    }
    check(
        worst_norm < 1e-9,
        format!("norm deviation {worst_norm:.2e}"),
    )?;
    check(
        worst_scale < 1e-9,
        format!("scale deviation {worst_scale:.2e}"),
    )?;
    Ok(format!(
        "norm deviation {worst_norm:.1e}, scale deviation {worst_scale:.1e}"
    ))
}

fn pca_oracle() -> Outcome {
    let mut r = rng(5);
    let mut data = gaussian_matrix(20, 4, &mut r);
    for (j, s) in [3.0, 1.5, 0.7, 0.2].iter().enumerate() {
        data.column_mut(j).mapv_inplace(|v| v * s);
    }
    let model = pca::fit_pca(data.view(), 2).map_err(|e| e.to_string())?;
    let (vals, vecs) = jacobi_eigen(&sample_covariance(&data));
    let projected = pca::project(&model, data.view()).map_err(|e| e.to_string())?;
    let mean = data.mean_axis(Axis(0)).expect("rows");
    let mut worst = 0.0f64;
    for c in 0..2 {
        worst = worst.max((model.explained_variance[c] - vals[c]).abs() / vals[0]);
        // Projections are compared up to the sign of each direction.
        let sign = dot(
            model.components.row(c).as_slice().expect("contiguous"),
            &vecs[c],
        )
        .signum();
        for (row, out) in data.outer_iter().zip(projected.outer_iter()) {
            let centered: Vec<f64> = row.iter().zip(mean.iter()).map(|(a, m)| a - m).collect();
            worst = worst.max((out[c] - sign * dot(&centered, &vecs[c])).abs());
        }
    }
    check(worst < 1e-6, format!("oracle deviation {worst:.2e}"))?;

    let line = Array2::from_shape_fn((20, 2), |(i, j)| {
        (i as f64 - 9.5) * if j == 0 { 1.0 } else { 2.0 }
    });
    let m = pca::fit_pca(line.view(), 1).map_err(|e| e.to_string())?;
    let expected = [1.0 / 5f64.sqrt(), 2.0 / 5f64.sqrt()];
    let dev = (m.components[[0, 0]] - expected[0])
        .abs()
        .max((m.components[[0, 1]] - expected[1]).abs());
    check(dev < 1e-6, format!("line direction deviation {dev:.2e}"))?;
    Ok(format!(
        "oracle deviation {worst:.1e}, line direction deviation {dev:.1e}"
    ))
}

fn svm_blobs() -> Outcome {
    let mut r = rng(6);
    let (train, train_y) = blobs(3, 50, 10.0, &mut r);
    let (test, test_y) = blobs(3, 50, 10.0, &mut r);
    let names = class_names(3);
    let model =
        svm::train_ovr(train.view(), &train_y, &names, 10.0, 1).map_err(|e| e.to_string())?;
    let again =
        svm::train_ovr(train.view(), &train_y, &names, 10.0, 1).map_err(|e| e.to_string())?;
    check(
        model == again,
        "retraining with the same seed changed the model",
    )?;
    let acc = |x: &Array2<f64>, y: &[usize]| -> Result<f64, String> {
        let mut hits = 0;
        for (row, &l) in x.outer_iter().zip(y) {
            if svm::predict(&model, row.as_slice().expect("contiguous"))
                .map_err(|e| e.to_string())?
                == l
            {
                hits += 1;
            }
        }
        Ok(hits as f64 / y.len() as f64)
    };
    let (tr, te) = (acc(&train, &train_y)?, acc(&test, &test_y)?);
    check(tr == 1.0, format!("training accuracy {tr}"))?;
    check(te >= 0.98, format!("test accuracy {te}"))?;
    Ok(format!(
        "train {:.1}%, test {:.1}%, deterministic",
        tr * 100.0,
        te * 100.0
    ))
}

fn synthetic_pipeline() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = synthetic::write_dataset(&SyntheticSpec::default(), dir.path())
        .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for mode in [Mode::Fv, Mode::Fc, Mode::FvFc] {
        let mut cfg = ExperimentConfig::new(&manifest, Protocol::HalfSplit);
        cfg.rounds = 3;
        cfg.k_gaussians = Some(8);
        cfg.mode = mode;
        let report = experiment::run_experiment(&cfg).map_err(|e| e.to_string())?;
        check(
            report.rounds.len() == 3,
            format!("{mode}: {} rounds", report.rounds.len()),
        )?;
        check(
            report.mean_accuracy >= 0.95,
            format!("{mode}: mean accuracy {:.4}", report.mean_accuracy),
        )?;
        parts.push(format!("{mode} {:.3}", report.mean_accuracy));
    }
    within(Duration::from_secs(60), started)?;
    Ok(format!("{} in {:.1?}", parts.join(", "), started.elapsed()))
}

fn descriptor_lengths() -> Outcome {
    let mut r = rng(8);
    let features = gaussian_matrix(30, 176, &mut r);
    let set = MergedFeatureSet {
        features,
        source_counts: (30, 0),
    };
    let mut lens = Vec::new();
    for k in [64usize, 16] {
        let model = GmmModel::new(
            Array1::from_elem(k, 1.0 / k as f64),
            gaussian_matrix(k, 176, &mut r),
            Array2::from_elem((k, 176), 1.0),
        )
        .map_err(|e| e.to_string())?;
        lens.push(
            fisher::encode_fv(&model, &set)
                .map_err(|e| e.to_string())?
                .values
                .len(),
        );
    }
    check(lens == [22592, 5648], format!("lengths {lens:?}"))?;
    Ok(format!("K=64 -> {}, K=16 -> {}", lens[0], lens[1]))
}

fn report_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticSpec {
        classes: 3,
        per_class: 10,
        ..Default::default()
    };
    let manifest =
        synthetic::write_dataset(&spec, &dir.path().join("data")).map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::new(&manifest, Protocol::HalfSplit);
    cfg.rounds = 2;
    cfg.k_gaussians = Some(4);
    cfg.seed = 11;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let report = experiment::run_experiment(&cfg).map_err(|e| e.to_string())?;
        let out = dir.path().join(format!("run{run}"));
        emit_report(&report, &[ReportFormat::Json], &out).map_err(|e| e.to_string())?;
        outputs.push(std::fs::read(out.join("report.json")).map_err(|e| e.to_string())?);
    }
    check(outputs[0] == outputs[1], "report.json differs between runs")?;
    Ok(format!("two runs, {} identical bytes", outputs[0].len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (
            "A1",
            "Fisher vector matches finite-difference gradient",
            fisher_gradient,
        ),
        ("A2", "EM log-likelihood is monotone", em_monotone),
        (
            "A3",
            "Bhattacharyya kernel equals inner product of feature maps",
            kernel_identity,
        ),
        (
            "A4",
            "descriptor normalization and scale invariance",
            normalization,
        ),
        ("A5", "PCA matches eigendecomposition oracle", pca_oracle),
        ("A6", "SVM separates three blobs", svm_blobs),
        (
            "A7",
            "end-to-end accuracy on synthetic textures",
            synthetic_pipeline,
        ),
        (
            "A8",
            "Fisher vector lengths for both presets",
            descriptor_lengths,
        ),
        (
            "A9",
            "report.json is byte-identical across runs",
            report_determinism,
        ),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, run) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("{id} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id} FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of 9 acceptance criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
