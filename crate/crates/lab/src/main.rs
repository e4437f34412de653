use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradleak_core::{Precision, Real};
use gradleak_lab::config::ExperimentConfig;
use gradleak_lab::datasets::load_dataset;
use gradleak_lab::experiment::{prepare_model, run_experiment, run_sweep, save_checkpoint, ResultsBundle};
use gradleak_lab::report::{emit_report, emit_sweep_summary, load_bundle, summary_rows, write_rounds, SUMMARY_HEADER};
use gradleak_lab::{LabError, Result};

/// Gradient inversion attacks and defenses in simulated federated learning.
///
/// Every flag can also be set through an environment variable with the
/// `GRADLEAK_` prefix, e.g. `GRADLEAK_SEED=3`.
#[derive(Parser)]
#[command(name = "gradleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Federated training; saves the final global model as a checkpoint.
    Train(Common),
    /// Attacks victims of the configured model and writes a report.
    Attack(Common),
    /// Runs the configured parameter grid, one report per grid point.
    Sweep(Common),
    /// Re-renders the report files of an existing results directory.
    Report {
        /// Directory holding results.json.
        #[arg(long, env = "GRADLEAK_OUT")]
        out: PathBuf,
        /// Destination; defaults to the results directory itself.
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file; built-in defaults when omitted.
    #[arg(long, env = "GRADLEAK_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "GRADLEAK_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "GRADLEAK_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "GRADLEAK_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Number of victim images.
    #[arg(long, env = "GRADLEAK_VICTIMS")]
    victims: Option<usize>,
    #[arg(long, env = "GRADLEAK_PRECISION", value_parser = ["32", "64"])]
    precision: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out.clone_from(o);
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(v) = self.victims {
            cfg.victims = v;
        }
        if let Some(p) = &self.precision {
            cfg.precision = p.parse().map_err(|_| LabError::Config(format!("precision {p}")))?;
        }
        cfg.precision()?;
        Ok(cfg)
    }
}

fn print_summary(bundles: &[ResultsBundle]) {
    println!("{}", SUMMARY_HEADER.join("\t"));
    for b in bundles {
        for row in summary_rows(b) {
            println!("{}", row.join("\t"));
        }
    }
}

fn train<T: Real>(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_dataset(&cfg.dataset)?;
    let trained = prepare_model::<T>(cfg, &data)?;
    if let Some(p) = &cfg.checkpoint {
        // prepare_model skips training when the checkpoint already exists.
        if trained.rounds.is_empty() {
            eprintln!("checkpoint {} exists, nothing to train", p.display());
            return Ok(());
        }
    } else {
        save_checkpoint(&trained.state, &cfg.out.join("model.ckpt"))?;
    }
    std::fs::create_dir_all(&cfg.out)?;
    write_rounds(&cfg.out.join("rounds.csv"), &trained.rounds)?;
    if let Some(acc) = trained.accuracy {
        println!("rounds {} test accuracy {:.2}%", trained.rounds.len(), 100.0 * acc);
    }
    Ok(())
}

fn finish(bundles: &[ResultsBundle]) -> ExitCode {
    print_summary(bundles);
    if bundles.iter().any(ResultsBundle::any_numerical_failure) {
        eprintln!("numerical failure in at least one victim");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(c) => {
            let mut cfg = c.resolve()?;
            cfg.train = true;
            match cfg.precision()? {
                Precision::F32 => train::<f32>(&cfg)?,
                Precision::F64 => train::<f64>(&cfg)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack(c) => {
            let cfg = c.resolve()?;
            let bundle = run_experiment(&cfg)?;
            emit_report(&bundle, &cfg.out)?;
            Ok(finish(&[bundle]))
        }
        Command::Sweep(c) => {
            let cfg = c.resolve()?;
            let bundles = run_sweep(&cfg)?;
            for b in &bundles {
                emit_report(b, &b.config.out)?;
            }
            emit_sweep_summary(&bundles, &cfg.out.join("summary.csv"))?;
            Ok(finish(&bundles))
        }
        Command::Report { out, to } => {
            let bundle = load_bundle(&out)?;
            emit_report(&bundle, to.as_deref().unwrap_or(Path::new(&out)))?;
            Ok(finish(&[bundle]))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
