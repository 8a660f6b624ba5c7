use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use swag_lora::ensemble::{
    ensemble_predict, multiswag_predict, save_ensemble, load_ensemble, EnsembleSpec, MemberArtifact, MemberMethod,
    PredictiveStack,
};
use swag_lora::harness::run::{member_seed, train_trajectory, PreparedData};
use swag_lora::harness::{emit_report, run_experiment, ExperimentConfig, Report, ReportFormat};
use swag_lora::metrics::{auroc, average_entropy, entropies, CalibrationReport, EvalInput};
use swag_lora::swag::{SampleSpec, SwagPosterior};
use swag_lora::{Error, Result};

#[derive(Parser)]
#[command(name = "swag-lora", version, about = "SWAG over low-rank adapters: training, evaluation and experiment reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Table => ReportFormat::Table,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Artifact {
    Map,
    Swa,
    Swag,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set schedule.max_lr=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full method × dataset × seed grid and write the report.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: config `output`, else `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// What to print on stdout.
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Train ensemble members on the configured training split and save them.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "swag")]
        method: Artifact,
        #[arg(long, default_value_t = 1)]
        members: usize,
        /// Run seed; member seeds are derived from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Calibration metrics of a saved ensemble on the ID test split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model_dir: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Also write the per-bin reliability table as CSV.
        #[arg(long)]
        bins_csv: Option<PathBuf>,
    },
    /// OOD-detection AUROC of a saved ensemble for each configured shift.
    Ood {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model_dir: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Re-render a saved report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Print the default experiment config.
    DefaultConfig,
}

#[derive(clap::Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = 15)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::Parse { .. } | Error::Stratification(_) | Error::Json(_) | Error::Csv(_)
    )
}

fn write_report_files(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    emit_report(report, ReportFormat::Json, Some(&dir.join("report.json")))?;
    emit_report(report, ReportFormat::Csv, Some(&dir.join("report.csv")))?;
    emit_report(report, ReportFormat::Table, Some(&dir.join("report.txt")))
}

fn predict_saved(
    members: &[MemberArtifact],
    sampling: &SamplingArgs,
    features: ndarray::ArrayView2<f64>,
) -> Result<PredictiveStack> {
    match members.first() {
        Some(MemberArtifact::Swag { template, .. }) => {
            let posteriors: Vec<&SwagPosterior> = members
                .iter()
                .filter_map(|m| match m {
                    MemberArtifact::Swag { posterior, .. } => Some(posterior),
                    _ => None,
                })
                .collect();
            let spec = SampleSpec {
                n_samples: sampling.samples,
                scale: sampling.scale,
                seed: sampling.sample_seed,
            };
            multiswag_predict(template, &posteriors, &spec, features)
        }
        _ => {
            let models: Vec<_> = members
                .iter()
                .map(|m| match m {
                    MemberArtifact::Map(m) | MemberArtifact::Swa(m) => m.clone(),
                    MemberArtifact::Swag { template, .. } => template.clone(),
                })
                .collect();
            ensemble_predict(&models, features)
        }
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            cfg,
            out,
            workers,
            format,
        } => {
            let mut config = cfg.load()?;
            if workers.is_some() {
                config.workers = workers;
            }
            config.validate()?;
            let dir = out
                .or_else(|| config.output.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let report = run_experiment(&config)?;
            write_report_files(&report, &dir)?;
            emit_report(&report, format.into(), None)?;
            if report.failed_cells() > 0 {
                eprintln!("{} cell(s) failed; see {}", report.failed_cells(), dir.join("report.json").display());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Train {
            cfg,
            out,
            method,
            members,
            seed,
        } => {
            let config = cfg.load()?;
            if members == 0 {
                return Err(Error::Config("--members must be at least 1".into()));
            }
            let data = PreparedData::build(&config)?;
            let model_config = data.model_config(&config);
            model_config.validate()?;
            let method = match method {
                Artifact::Map => MemberMethod::Map,
                Artifact::Swa => MemberMethod::Swa,
                Artifact::Swag => MemberMethod::Swag,
            };
            let seeds: Vec<u64> = (0..members).map(|i| member_seed(seed, i)).collect();
            let mut artifacts = Vec::new();
            for (i, &s) in seeds.iter().enumerate() {
                let t = train_trajectory(
                    &model_config,
                    &data.train,
                    &config.plan,
                    &config.schedule,
                    s,
                    method != MemberMethod::Map,
                    config.max_rank,
                );
                let map = t.map.map_err(|e| Error::Numeric(format!("member {i}: {e}")))?;
                let art = match method {
                    MemberMethod::Map => MemberArtifact::Map(map),
                    _ => {
                        let p = t
                            .posterior
                            .expect("collection requested")
                            .map_err(|e| Error::Numeric(format!("member {i}: {e}")))?;
                        let swa = map.with_params(p.mean())?;
                        if method == MemberMethod::Swa {
                            MemberArtifact::Swa(swa)
                        } else {
                            MemberArtifact::Swag {
                                template: swa,
                                posterior: p,
                            }
                        }
                    }
                };
                artifacts.push(art);
            }
            let spec = EnsembleSpec {
                member_seeds: seeds,
                method,
                max_rank: config.max_rank,
            };
            save_ensemble(&out, &spec, &artifacts)?;
            eprintln!("saved {members} member(s) to {}", out.display());
        }
        Command::Evaluate {
            cfg,
            model_dir,
            sampling,
            bins_csv,
        } => {
            let config = cfg.load()?;
            let data = PreparedData::build(&config)?;
            let (_, members) = load_ensemble(&model_dir)?;
            let test = &data.eval[0].data;
            let stack = predict_saved(&members, &sampling, test.features().view())?;
            let input = EvalInput::new(&stack.pooled, Some(&stack.members), test.labels())?;
            let report = CalibrationReport::compute(&input, config.metrics.n_bins)?;
            if let Some(path) = bins_csv {
                report.write_bins_csv(&path)?;
            }
            print_json(&serde_json::to_value(&report)?)?;
        }
        Command::Ood {
            cfg,
            model_dir,
            sampling,
        } => {
            let config = cfg.load()?;
            let data = PreparedData::build(&config)?;
            let (_, members) = load_ensemble(&model_dir)?;
            let id = predict_saved(&members, &sampling, data.eval[0].data.features().view())?;
            let id_h = entropies(&id.pooled);
            let id_avg = average_entropy(Some(&id.members))?;
            let mut rows = Vec::new();
            for set in &data.eval[1..] {
                let p = predict_saved(&members, &sampling, set.data.features().view())?;
                rows.push(json!({
                    "dataset": set.name,
                    "auroc_entropy": auroc(&id_h, &entropies(&p.pooled))?,
                    "auroc_avg_entropy": auroc(&id_avg, &average_entropy(Some(&p.members))?)?,
                }));
            }
            print_json(&serde_json::Value::Array(rows))?;
        }
        Command::Report { input, format } => {
            let report = Report::from_json(&fs::read_to_string(&input)?)?;
            emit_report(&report, format.into(), None)?;
        }
        Command::DefaultConfig => println!("{}", ExperimentConfig::default().to_json()?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
