use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ExperimentConfig, ExperimentError};
use crate::store;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChosenCosts {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GmmSummary {
    pub samples: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_avg_loglik: f64,
    pub component_resets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundReport {
    pub name: String,
    pub n_train: usize,
    pub n_test: usize,
    /// trace(confusion) / n_test
    pub accuracy: f64,
    /// rows = true class, columns = predicted class
    pub confusion: Vec<Vec<u64>>,
    pub costs: ChosenCosts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gmm: Option<GmmSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pca_rank_deficient: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbortedRound {
    pub name: String,
    pub stage: String,
    pub error: String,
}

/// Wall-clock timings. Kept out of `report.json` so reruns stay byte-identical.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub rounds: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub class_names: Vec<String>,
    pub rounds: Vec<RoundReport>,
    pub aborted_rounds: Vec<AbortedRound>,
    pub mean_accuracy: f64,
    /// Population standard deviation over completed rounds.
    pub std_accuracy: f64,
    /// Sum of the per-round confusion matrices.
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip)]
    pub timing: Timing,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn accuracy_of(confusion: &[Vec<u64>]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = confusion.iter().enumerate().map(|(i, row)| row[i]).sum();
    if total == 0 {
        0.0
    } else {
        trace as f64 / total as f64
    }
}

impl ExperimentReport {
    pub fn assemble(
        config: ExperimentConfig,
        class_names: Vec<String>,
        rounds: Vec<RoundReport>,
        aborted_rounds: Vec<AbortedRound>,
        timing: Timing,
    ) -> Result<Self, ExperimentError> {
        let accs: Vec<f64> = rounds.iter().map(|r| r.accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&accs)
            .ok_or_else(|| ExperimentError::Data("no completed rounds to report".into()))?;
        let c = class_names.len();
        let mut confusion = vec![vec![0u64; c]; c];
        for r in &rounds {
            for (i, row) in r.confusion.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    confusion[i][j] += v;
                }
            }
        }
        Ok(ExperimentReport {
            config,
            class_names,
            rounds,
            aborted_rounds,
            mean_accuracy,
            std_accuracy,
            confusion,
            timing,
        })
    }

    pub fn to_json(&self) -> Result<Vec<u8>, ExperimentError> {
        let mut out = serde_json::to_vec_pretty(self)
            .map_err(|e| ExperimentError::Data(format!("serializing report: {e}")))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for name in &self.class_names {
            out.push(',');
            out.push_str(&csv_field(name));
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(&csv_field(name));
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes `report.json` and/or `confusion.csv` (plus `timing.json` with the JSON) into `out_dir`.
pub fn emit_report(
    report: &ExperimentReport,
    formats: &[ReportFormat],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ExperimentError> {
    if report.rounds.is_empty() {
        return Err(ExperimentError::Data(
            "refusing to emit a report with no rounds".into(),
        ));
    }
    let io = |p: &Path, e: std::io::Error| ExperimentError::Data(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            ReportFormat::Json => {
                let p = out_dir.join("report.json");
                store::write_atomic(&p, &report.to_json()?).map_err(|e| io(&p, e))?;
                written.push(p);
                let t = out_dir.join("timing.json");
                let json = serde_json::to_vec_pretty(&report.timing)
                    .map_err(|e| ExperimentError::Data(e.to_string()))?;
                store::write_atomic(&t, &json).map_err(|e| io(&t, e))?;
            }
            ReportFormat::Csv => {
                let p = out_dir.join("confusion.csv");
                store::write_atomic(&p, report.confusion_csv().as_bytes())
                    .map_err(|e| io(&p, e))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
