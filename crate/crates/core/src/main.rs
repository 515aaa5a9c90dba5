use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use texfisher::experiment::{
    self, emit_report, make_splits, ExperimentConfig, ExperimentError, Protocol, ReportFormat,
};
use texfisher::gmm::{GmmModel, GmmOptions};
use texfisher::pca::PcaModel;
use texfisher::{fisher, store, synthetic};

#[derive(Parser)]
#[command(
    name = "texfisher",
    version,
    about = "Fisher vector texture classification over exported CNN features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment and write report.json and confusion.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the report files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the train/test splits a protocol produces, as JSON.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
    },
    /// Encode every manifest entry with a fitted PCA and GMM.
    Encode {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long)]
        pca: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit PCA and GMM on all manifest entries (writes pca.json and gmm.json).
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = texfisher::gmm::DEFAULT_MAX_SAMPLES)]
        max_samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset of feature bundles plus manifest.json.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
    },
}

fn data_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Data(e.to_string())
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = experiment::run_experiment(&cfg)?;
            let written = emit_report(&report, &[ReportFormat::Json, ReportFormat::Csv], &out)?;
            println!(
                "accuracy {:.4} +/- {:.4} over {} round(s)",
                report.mean_accuracy,
                report.std_accuracy,
                report.rounds.len()
            );
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Split {
            manifest,
            protocol,
            seed,
            rounds,
        } => {
            if rounds == 0 {
                return Err(ExperimentError::Config("rounds must be at least 1".into()));
            }
            let m = store::load_manifest(&manifest)?;
            let splits = make_splits(&m, protocol, rounds, seed)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&splits).map_err(data_err)?
            );
        }
        Command::Encode {
            manifest,
            gmm,
            pca,
            out,
        } => {
            let m = store::load_manifest(&manifest)?;
            let (gmm, _) =
                GmmModel::load(&gmm).map_err(|e| ExperimentError::Config(e.to_string()))?;
            let pca = PcaModel::load(&pca).map_err(|e| ExperimentError::Config(e.to_string()))?;
            let fvs = fisher::encode_dataset(&m, &pca, &gmm)?;
            std::fs::create_dir_all(&out).map_err(data_err)?;
            let mut index = BTreeMap::new();
            for (i, entry) in m.entries.iter().enumerate() {
                let stem = format!("fv{i:06}");
                fvs[&entry.image_id].save(&out, &stem)?;
                index.insert(entry.image_id.clone(), format!("{stem}.json"));
            }
            let json = serde_json::to_vec_pretty(&index).map_err(data_err)?;
            store::write_atomic(&out.join("index.json"), &json).map_err(data_err)?;
            println!("encoded {} image(s) into {}", fvs.len(), out.display());
        }
        Command::Fit {
            manifest,
            k,
            seed,
            max_samples,
            out,
        } => {
            if k == 0 || max_samples == 0 {
                return Err(ExperimentError::Config(
                    "k and max_samples must be positive".into(),
                ));
            }
            let m = store::load_manifest(&manifest)?;
            let ids: Vec<String> = m.entries.iter().map(|e| e.image_id.clone()).collect();
            let (pca, gmm, info) =
                experiment::fit_encoders(&m, &ids, k, seed, max_samples, GmmOptions::default())?;
            std::fs::create_dir_all(&out).map_err(data_err)?;
            pca.save(&out.join("pca.json"))?;
            gmm.save(&out.join("gmm.json"), &info)?;
            println!(
                "fitted PCA {}->{} and GMM K={} ({} EM iterations)",
                pca.input_dim(),
                pca.output_dim(),
                gmm.n_components(),
                info.iterations
            );
        }
        Command::Synth {
            out,
            seed,
            classes,
            per_class,
        } => {
            let spec = synthetic::SyntheticSpec {
                seed,
                classes,
                per_class,
                ..Default::default()
            };
            let path = synthetic::write_dataset(&spec, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
