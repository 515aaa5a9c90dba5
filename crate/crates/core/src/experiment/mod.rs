//! End-to-end experiment driver: splits, per-round model fitting, encoding,
//! SVM training and evaluation.
//!
//! Each round fits PCA and the GMM on that round's training images only,
//! encodes every image of the round, trains the SVM(s) selected by the mode
//! and scores the test images. Rounds run one after another; encoding within a
//! round is parallel over images.

pub mod cache;
pub mod config;
pub mod report;
pub mod splits;

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use config::{ExperimentConfig, Mode, Preset, Protocol};
pub use report::{emit_report, ExperimentReport, ReportFormat, RoundReport};
pub use splits::{make_splits, Split, SplitError};

use crate::fisher::{self, EncodeError};
use crate::gmm::{self, GmmError, GmmModel, GmmOptions};
use crate::pca::{self, CovarianceAccumulator, PcaError, PcaModel};
use crate::store::{self, DatasetManifest, FeatureBundle, StoreError};
use crate::svm::{self, SvmError, SvmModel};
use crate::transform::{self, DescriptorKind};
use cache::DescriptorCache;
use report::{AbortedRound, ChosenCosts, GmmSummary, Timing};

/// Costs tried on the validation part of predefined splits.
pub const COST_GRID: [f64; 3] = [0.1, 1.0, 10.0];
const LOAD_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl ExperimentError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::Data(_) => 2,
            ExperimentError::Numeric(_) => 3,
        }
    }
}

impl From<StoreError> for ExperimentError {
    fn from(e: StoreError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<SplitError> for ExperimentError {
    fn from(e: SplitError) -> Self {
        match e {
            SplitError::MissingTag { .. }
            | SplitError::BadSplitTag { .. }
            | SplitError::MissingGroup { .. } => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<PcaError> for ExperimentError {
    fn from(e: PcaError) -> Self {
        match e {
            PcaError::Store(_)
            | PcaError::Header(_)
            | PcaError::DimensionMismatch { .. }
            | PcaError::InsufficientSamples { .. }
            | PcaError::TargetTooLarge { .. }
            | PcaError::ZeroTarget => ExperimentError::Data(e.to_string()),
            PcaError::NonFinite => ExperimentError::Numeric(e.to_string()),
        }
    }
}

impl From<GmmError> for ExperimentError {
    fn from(e: GmmError) -> Self {
        ExperimentError::from_gmm_ref(&e)
    }
}

impl From<EncodeError> for ExperimentError {
    fn from(e: EncodeError) -> Self {
        let numeric = {
            let mut cur = &e;
            loop {
                match cur {
                    EncodeError::Image { source, .. } => cur = source,
                    EncodeError::NonFinite { .. } => break true,
                    EncodeError::Gmm(g) => {
                        break !matches!(ExperimentError::from_gmm_ref(g), ExperimentError::Data(_))
                    }
                    _ => break false,
                }
            }
        };
        if numeric {
            ExperimentError::Numeric(e.to_string())
        } else {
            ExperimentError::Data(e.to_string())
        }
    }
}

impl ExperimentError {
    fn from_gmm_ref(e: &GmmError) -> ExperimentError {
        match e {
            GmmError::Store(_)
            | GmmError::Header(_)
            | GmmError::DimensionMismatch { .. }
            | GmmError::TooFewRows { .. } => ExperimentError::Data(e.to_string()),
            _ => ExperimentError::Numeric(e.to_string()),
        }
    }
}

impl From<SvmError> for ExperimentError {
    fn from(e: SvmError) -> Self {
        match e {
            SvmError::NonFinite(_) | SvmError::BadCost(_) => {
                ExperimentError::Numeric(e.to_string())
            }
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Pca,
    Gmm,
    Encode,
    Svm,
    Evaluate,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Pca => "pca",
            Stage::Gmm => "gmm",
            Stage::Encode => "encode",
            Stage::Svm => "svm",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Hooks called with the image ids each fitting stage consumed.
pub trait RunObserver {
    fn on_fit(&mut self, _stage: Stage, _round: &str, _ids: &[String]) {}
}

pub struct NoopObserver;

impl RunObserver for NoopObserver {}

#[derive(Debug)]
struct RoundFailure {
    stage: Stage,
    error: ExperimentError,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, RoundFailure>;
}

impl<T, E: Into<ExperimentError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, RoundFailure> {
        self.map_err(|e| RoundFailure {
            stage,
            error: e.into(),
        })
    }
}

type Descriptors = HashMap<String, Vec<f64>>;

/// Prepared descriptors are stored as f32 in the cache; rounding them the same
/// way on every path makes cache hits and misses produce identical results.
fn quantize(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    run_experiment_with(config, &mut NoopObserver)
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    observer: &mut dyn RunObserver,
) -> Result<ExperimentReport, ExperimentError> {
    config.validate()?;
    let started = Instant::now();
    let manifest = store::load_manifest(&config.manifest_path)?;
    let splits = make_splits(&manifest, config.protocol, config.rounds, config.seed)?;

    let mut effective = config.clone();
    effective.cache_dir = cache::resolve_cache_dir(config.cache_dir.as_deref());
    let manifest_bytes = std::fs::read(&config.manifest_path)
        .map_err(|e| ExperimentError::Data(format!("{}: {e}", config.manifest_path.display())))?;
    let runner = Runner {
        labels: manifest
            .entries
            .iter()
            .map(|e| {
                let idx = manifest
                    .class_index(&e.class_label)
                    .expect("validated manifest");
                (e.image_id.clone(), idx)
            })
            .collect(),
        manifest,
        manifest_hash: cache::hash_hex(&[&manifest_bytes]),
        config: effective,
    };

    let fc = if config.mode.uses_fc() {
        Some(runner.fc_descriptors()?)
    } else {
        None
    };

    let mut rounds = Vec::new();
    let mut aborted = Vec::new();
    let mut first_failure = None;
    let mut timing = Timing::default();
    for (r, split) in splits.iter().enumerate() {
        let t0 = Instant::now();
        match runner.run_round(r, split, fc.as_ref(), observer) {
            Ok(rep) => {
                log::info!("{}: accuracy {:.4}", split.name, rep.accuracy);
                rounds.push(rep);
            }
            Err(f) => {
                log::error!(
                    "{} aborted in {} stage: {}",
                    split.name,
                    f.stage.name(),
                    f.error
                );
                aborted.push(AbortedRound {
                    name: split.name.clone(),
                    stage: f.stage.name().into(),
                    error: f.error.to_string(),
                });
                first_failure.get_or_insert(f.error);
            }
        }
        timing
            .rounds
            .push((split.name.clone(), t0.elapsed().as_secs_f64()));
    }
    timing.total_seconds = started.elapsed().as_secs_f64();
    if rounds.is_empty() {
        return Err(
            first_failure.unwrap_or_else(|| ExperimentError::Data("no rounds to run".into()))
        );
    }
    let class_names = runner.manifest.class_names.clone();
    ExperimentReport::assemble(runner.config, class_names, rounds, aborted, timing)
}

struct Runner {
    config: ExperimentConfig,
    manifest: DatasetManifest,
    manifest_hash: String,
    labels: HashMap<String, usize>,
}

impl Runner {
    fn entry(&self, id: &str) -> &store::ManifestEntry {
        self.manifest
            .entry(id)
            .expect("split ids come from the manifest")
    }

    fn cache(&self, parts: &[&[u8]]) -> Option<DescriptorCache> {
        let root = self.config.cache_dir.as_ref()?;
        let key = cache::hash_hex(parts);
        match DescriptorCache::new(root, &key) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("descriptor cache disabled: {e}");
                None
            }
        }
    }

    fn fc_descriptors(&self) -> Result<Descriptors, ExperimentError> {
        let cache = self.cache(&[self.manifest_hash.as_bytes(), b"fc"]);
        let out: Result<Vec<(String, Vec<f64>)>, ExperimentError> = self
            .manifest
            .entries
            .par_iter()
            .map(|e| {
                if let Some(v) = cache.as_ref().and_then(|c| c.get(&e.image_id, None)) {
                    return Ok((e.image_id.clone(), v));
                }
                let t = store::read_tensor_file(&self.manifest.resolve(&e.fc_path))?;
                let d = transform::prepare_descriptor(&t.to_vector().to_vec(), DescriptorKind::Fc);
                let v = quantize(d.values);
                if let Some(c) = &cache {
                    c.put(&e.image_id, &v);
                }
                Ok((e.image_id.clone(), v))
            })
            .collect();
        Ok(out?.into_iter().collect())
    }

    fn load_chunked<T: Send>(
        &self,
        ids: &[String],
        f: impl Fn(FeatureBundle) -> Result<T, ExperimentError> + Sync,
        mut sink: impl FnMut(T) -> Result<(), ExperimentError>,
    ) -> Result<(), ExperimentError> {
        for chunk in ids.chunks(LOAD_CHUNK) {
            let loaded: Vec<Result<T, ExperimentError>> = chunk
                .par_iter()
                .map(|id| {
                    let b = FeatureBundle::load(&self.manifest, self.entry(id))?;
                    f(b)
                })
                .collect();
            for item in loaded {
                sink(item?)?;
            }
        }
        Ok(())
    }

    fn fit_pca(&self, ids: &[String]) -> Result<PcaModel, RoundFailure> {
        let first = self.entry(&ids[0]);
        let shape = store::read_tensor_file_shape(&self.manifest.resolve(&first.penultimate_path))
            .at(Stage::Load)?;
        let target = *shape.last().expect("tensor has dims");
        let last_shape = store::read_tensor_file_shape(&self.manifest.resolve(&first.last_path))
            .at(Stage::Load)?;
        let mut acc = CovarianceAccumulator::new(*last_shape.last().expect("tensor has dims"));
        self.load_chunked(
            ids,
            |b| Ok(b.last),
            |last| acc.update(last.view()).map_err(ExperimentError::from),
        )
        .at(Stage::Pca)?;
        pca::fit_from_accumulator(&acc, target).at(Stage::Pca)
    }

    fn gmm_sample(
        &self,
        ids: &[String],
        pca: &PcaModel,
        seed: u64,
    ) -> Result<Array2<f64>, RoundFailure> {
        let mut counts = Vec::with_capacity(ids.len());
        for id in ids {
            let e = self.entry(id);
            let t1 = store::read_tensor_file_shape(&self.manifest.resolve(&e.penultimate_path))
                .at(Stage::Load)?[0];
            let t2 = store::read_tensor_file_shape(&self.manifest.resolve(&e.last_path))
                .at(Stage::Load)?[0];
            counts.push(t1 + t2);
        }
        let total: usize = counts.iter().sum();
        let keep = total.min(self.config.max_gmm_samples);
        let selected: Option<Vec<usize>> = (keep < total).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, total, keep).into_vec();
            idx.sort_unstable();
            idx
        });

        let mut data = Array2::<f64>::zeros((keep, pca.output_dim()));
        let mut offset = 0usize;
        let mut out_row = 0usize;
        let mut sel_pos = 0usize;
        self.load_chunked(
            ids,
            |b| fisher::merge_layers(&b, pca).map_err(ExperimentError::from),
            |merged| {
                let rows = merged.features.nrows();
                for (local, row) in merged.features.outer_iter().enumerate() {
                    let global = offset + local;
                    let take = match &selected {
                        None => true,
                        Some(sel) => {
                            if sel_pos < sel.len() && sel[sel_pos] == global {
                                sel_pos += 1;
                                true
                            } else {
                                false
                            }
                        }
                    };
                    if take {
                        data.row_mut(out_row).assign(&row);
                        out_row += 1;
                    }
                }
                offset += rows;
                Ok(())
            },
        )
        .at(Stage::Gmm)?;
        if out_row != keep {
            return Err(RoundFailure {
                stage: Stage::Gmm,
                error: ExperimentError::Data(format!(
                    "bundle shapes changed while sampling ({out_row} of {keep} rows)"
                )),
            });
        }
        Ok(data)
    }

    fn fv_descriptors(
        &self,
        split: &Split,
        ids: &[String],
        pca: &PcaModel,
        gmm: &GmmModel,
    ) -> Result<Descriptors, RoundFailure> {
        let mut cfg = self.config.clone();
        cfg.cache_dir = None;
        let cfg_json = serde_json::to_vec(&cfg).expect("config serializes");
        let cache = self.cache(&[
            &cfg_json,
            self.manifest_hash.as_bytes(),
            split.name.as_bytes(),
            b"fv",
        ]);
        let expected = gmm.fv_len();
        let out: Result<Vec<(String, Vec<f64>)>, ExperimentError> = ids
            .par_iter()
            .map(|id| {
                if let Some(v) = cache.as_ref().and_then(|c| c.get(id, Some(expected))) {
                    return Ok((id.clone(), v));
                }
                let wrap = |e: EncodeError| EncodeError::Image {
                    image_id: id.clone(),
                    source: Box::new(e),
                };
                let b = FeatureBundle::load(&self.manifest, self.entry(id))
                    .map_err(|e| wrap(e.into()))?;
                let fv = fisher::encode_bundle(&b, pca, gmm).map_err(wrap)?;
                let v =
                    quantize(transform::prepare_descriptor(&fv.values, DescriptorKind::Fv).values);
                if let Some(c) = &cache {
                    c.put(id, &v);
                }
                Ok((id.clone(), v))
            })
            .collect();
        Ok(out.at(Stage::Encode)?.into_iter().collect())
    }

    fn stack(&self, ids: &[String], desc: &Descriptors) -> (Array2<f64>, Vec<usize>) {
        let p = desc[&ids[0]].len();
        let mut m = Array2::zeros((ids.len(), p));
        for (mut row, id) in m.axis_iter_mut(Axis(0)).zip(ids) {
            row.assign(&ndarray::ArrayView1::from(&desc[id][..]));
        }
        (m, ids.iter().map(|id| self.labels[id]).collect())
    }

    fn train(
        &self,
        ids: &[String],
        desc: &Descriptors,
        cost: f64,
        seed: u64,
    ) -> Result<SvmModel, SvmError> {
        let (x, y) = self.stack(ids, desc);
        svm::train_ovr(x.view(), &y, &self.manifest.class_names, cost, seed)
    }

    /// Trains on the split's training part, picking the cost on its validation part when present.
    fn train_with_selection(
        &self,
        split: &Split,
        desc: &Descriptors,
        seed: u64,
    ) -> Result<(SvmModel, f64), SvmError> {
        let mut cost = self.config.cost;
        if !split.validation.is_empty() {
            let val: HashSet<&String> = split.validation.iter().collect();
            let fit_ids: Vec<String> = split
                .train
                .iter()
                .filter(|id| !val.contains(id))
                .cloned()
                .collect();
            let mut best = (f64::NEG_INFINITY, cost);
            for c in COST_GRID {
                let model = self.train(&fit_ids, desc, c, seed)?;
                let mut correct = 0usize;
                for id in &split.validation {
                    if svm::predict(&model, &desc[id])? == self.labels[id] {
                        correct += 1;
                    }
                }
                let acc = correct as f64 / split.validation.len() as f64;
                log::debug!("{}: cost {c} -> validation accuracy {acc:.4}", split.name);
                if acc > best.0 {
                    best = (acc, c);
                }
            }
            cost = best.1;
        }
        Ok((self.train(&split.train, desc, cost, seed)?, cost))
    }

    fn run_round(
        &self,
        round: usize,
        split: &Split,
        fc: Option<&Descriptors>,
        observer: &mut dyn RunObserver,
    ) -> Result<RoundReport, RoundFailure> {
        let round_seed = crate::mix_seed(self.config.seed, round as u64);
        let mode = self.config.mode;
        let in_round: HashSet<&String> = split.train.iter().chain(&split.test).collect();
        let round_ids: Vec<String> = self
            .manifest
            .entries
            .iter()
            .filter(|e| in_round.contains(&e.image_id))
            .map(|e| e.image_id.clone())
            .collect();

        let mut gmm_summary = None;
        let mut pca_rank_deficient = None;
        let fv = if mode.uses_fv() {
            let pca = self.fit_pca(&split.train)?;
            observer.on_fit(Stage::Pca, &split.name, &split.train);
            pca_rank_deficient = Some(pca.rank_deficient);
            if pca.rank_deficient {
                log::warn!("{}: PCA covariance is rank deficient", split.name);
            }

            let sample = self.gmm_sample(&split.train, &pca, crate::mix_seed(round_seed, 1))?;
            let opts = GmmOptions {
                max_iters: self.config.em_max_iters,
                tol: self.config.em_tol,
            };
            let (gmm, trace, info) = gmm::fit(
                sample.view(),
                self.config.k(),
                crate::mix_seed(round_seed, 2),
                opts,
            )
            .at(Stage::Gmm)?;
            observer.on_fit(Stage::Gmm, &split.name, &split.train);
            gmm_summary = Some(GmmSummary {
                samples: info.samples,
                iterations: info.iterations,
                converged: info.converged,
                final_avg_loglik: *trace.avg_loglik.last().expect("non-empty trace"),
                component_resets: trace.events.len(),
            });
            Some(self.fv_descriptors(split, &round_ids, &pca, &gmm)?)
        } else {
            None
        };

        let svm_seed = crate::mix_seed(round_seed, 3);
        let mut costs = ChosenCosts { fv: None, fc: None };
        let fv_model = match &fv {
            Some(desc) => {
                let (m, c) = self
                    .train_with_selection(split, desc, svm_seed)
                    .at(Stage::Svm)?;
                costs.fv = Some(c);
                Some(m)
            }
            None => None,
        };
        let fc_model = match fc {
            Some(desc) => {
                let (m, c) = self
                    .train_with_selection(split, desc, crate::mix_seed(svm_seed, 1))
                    .at(Stage::Svm)?;
                costs.fc = Some(c);
                Some(m)
            }
            None => None,
        };
        observer.on_fit(Stage::Svm, &split.name, &split.train);

        let c = self.manifest.class_names.len();
        let mut confusion = vec![vec![0u64; c]; c];
        for id in &split.test {
            let fv_scores = match (&fv_model, &fv) {
                (Some(m), Some(d)) => Some(svm::decision_values(m, &d[id]).at(Stage::Evaluate)?),
                _ => None,
            };
            let fc_scores = match (&fc_model, fc) {
                (Some(m), Some(d)) => Some(svm::decision_values(m, &d[id]).at(Stage::Evaluate)?),
                _ => None,
            };
            let predicted = match (fc_scores, fv_scores) {
                (Some(a), Some(b)) => svm::fuse_predict(&a, &b).at(Stage::Evaluate)?,
                (Some(s), None) | (None, Some(s)) => svm::argmax(&s.per_class),
                (None, None) => unreachable!("every mode trains at least one classifier"),
            };
            confusion[self.labels[id]][predicted] += 1;
        }

        Ok(RoundReport {
            name: split.name.clone(),
            n_train: split.train.len(),
            n_test: split.test.len(),
            accuracy: report::accuracy_of(&confusion),
            confusion,
            costs,
            gmm: gmm_summary,
            pca_rank_deficient,
        })
    }
}

/// Fits PCA and a GMM on every entry of `manifest` (or a subset of ids).
pub fn fit_encoders(
    manifest: &DatasetManifest,
    ids: &[String],
    k: usize,
    seed: u64,
    max_samples: usize,
    opts: GmmOptions,
) -> Result<(PcaModel, GmmModel, gmm::GmmFitInfo), ExperimentError> {
    if ids.is_empty() {
        return Err(ExperimentError::Data("no images to fit on".into()));
    }
    let mut cfg = ExperimentConfig::new(Path::new(""), Protocol::HalfSplit);
    cfg.max_gmm_samples = max_samples;
    let runner = Runner {
        labels: HashMap::new(),
        manifest: manifest.clone(),
        manifest_hash: String::new(),
        config: cfg,
    };
    let pca = runner.fit_pca(ids).map_err(|f| f.error)?;
    let sample = runner
        .gmm_sample(ids, &pca, crate::mix_seed(seed, 1))
        .map_err(|f| f.error)?;
    let (gmm, _, info) = gmm::fit(sample.view(), k, crate::mix_seed(seed, 2), opts)?;
    Ok((pca, gmm, info))
}
