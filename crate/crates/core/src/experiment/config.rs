use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::{gmm, svm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One round per distinct `sample_tag`; that sample trains, the rest test.
    KthSample,
    /// Seeded per-class 50/50 partitions, repeated `rounds` times.
    HalfSplit,
    /// Rounds and parts taken from each entry's `split_tag`.
    PredefinedSplit,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kth_sample" => Ok(Protocol::KthSample),
            "half_split" => Ok(Protocol::HalfSplit),
            "predefined_split" => Ok(Protocol::PredefinedSplit),
            other => Err(format!(
                "unknown protocol {other:?} (expected kth_sample, half_split or predefined_split)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "FV")]
    Fv,
    #[serde(rename = "FC")]
    Fc,
    #[serde(rename = "FV+FC")]
    FvFc,
}

impl Mode {
    pub fn uses_fv(self) -> bool {
        matches!(self, Mode::Fv | Mode::FvFc)
    }

    pub fn uses_fc(self) -> bool {
        matches!(self, Mode::Fc | Mode::FvFc)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Fv => "FV",
            Mode::Fc => "FC",
            Mode::FvFc => "FV+FC",
        })
    }
}

/// Named hyperparameter presets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[default]
    #[serde(rename = "default")]
    Standard,
    #[serde(rename = "1200tex")]
    Tex1200,
}

impl Preset {
    pub fn k_gaussians(self) -> usize {
        match self {
            Preset::Standard => 64,
            Preset::Tex1200 => 16,
        }
    }
}

fn default_rounds() -> usize {
    1
}
fn default_cost() -> f64 {
    svm::DEFAULT_COST
}
fn default_mode() -> Mode {
    Mode::FvFc
}
fn default_max_gmm_samples() -> usize {
    gmm::DEFAULT_MAX_SAMPLES
}
fn default_em_max_iters() -> usize {
    gmm::DEFAULT_MAX_ITERS
}
fn default_em_tol() -> f64 {
    gmm::DEFAULT_TOL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest_path: PathBuf,
    pub protocol: Protocol,
    /// Ignored by `kth_sample` and `predefined_split`, whose tags fix the rounds.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub preset: Preset,
    /// Overrides the preset's number of Gaussians.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_gaussians: Option<usize>,
    #[serde(default = "default_cost")]
    pub cost: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_max_gmm_samples")]
    pub max_gmm_samples: usize,
    #[serde(default = "default_em_max_iters")]
    pub em_max_iters: usize,
    #[serde(default = "default_em_tol")]
    pub em_tol: f64,
}

impl ExperimentConfig {
    pub fn new(manifest_path: impl Into<PathBuf>, protocol: Protocol) -> Self {
        ExperimentConfig {
            manifest_path: manifest_path.into(),
            protocol,
            rounds: default_rounds(),
            preset: Preset::default(),
            k_gaussians: None,
            cost: default_cost(),
            seed: 0,
            mode: default_mode(),
            cache_dir: None,
            max_gmm_samples: default_max_gmm_samples(),
            em_max_iters: default_em_max_iters(),
            em_tol: default_em_tol(),
        }
    }

    /// Parses a JSON config; relative paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let bytes = std::fs::read(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if cfg.manifest_path.is_relative() {
            cfg.manifest_path = base.join(&cfg.manifest_path);
        }
        if let Some(dir) = cfg.cache_dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn k(&self) -> usize {
        self.k_gaussians
            .unwrap_or_else(|| self.preset.k_gaussians())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.k() == 0 {
            return bad("k_gaussians must be at least 1".into());
        }
        if !(self.cost > 0.0 && self.cost.is_finite()) {
            return bad(format!("cost must be positive, got {}", self.cost));
        }
        if self.max_gmm_samples == 0 {
            return bad("max_gmm_samples must be positive".into());
        }
        if self.em_max_iters == 0 {
            return bad("em_max_iters must be at least 1".into());
        }
        if self.em_tol.is_nan() || self.em_tol <= 0.0 {
            return bad(format!("em_tol must be positive, got {}", self.em_tol));
        }
        Ok(())
    }
}
