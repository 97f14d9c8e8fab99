use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use normatch_lab::harness::{
    compare_policies, export_data, lambda_sweep, load_checkpoint, prepare_out_dir, run_experiment,
    ExperimentConfig,
};
use normatch_lab::normatch::WeightPolicy;
use normatch_lab::Error;

#[derive(Parser)]
#[command(
    name = "normatch",
    version,
    about = "Flow-consensus semi-supervised training on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write metrics CSVs plus a summary.
    Run {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Run only this seed.
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, conflicts_with_all = ["config", "seed_override"])]
        resume: Option<PathBuf>,
    },
    /// Run the same seeds under several weighting policies.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "ncue,ncue-zero,threshold:0.95,none"
        )]
        policies: Vec<WeightPolicy>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the config once per λ value.
    SweepLambda {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1e-7,1e-6,1e-5,1e-4")]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write each seed's train and test set as CSV.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf, out: Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    Ok(cfg)
}

fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run {
            resume: Some(path),
            out,
            ..
        } => {
            let mut run = load_checkpoint(&path)?;
            if let Some(dir) = out {
                run.config.out_dir = dir;
            }
            prepare_out_dir(&run.config.out_dir)?;
            run.run_to_end()?;
            run.write_csv(&run.csv_path())?;
            let s = run.summary();
            println!(
                "seed {}: test accuracy (EMA) {}%",
                s.seed,
                percent(s.test_acc_ema)
            );
        }
        Command::Run {
            config: Some(config),
            seed_override,
            out,
            resume: None,
        } => {
            let mut cfg = load(&config, out)?;
            if let Some(seed) = seed_override {
                cfg.seeds = vec![seed];
            }
            let s = run_experiment(&cfg)?;
            for seed in &s.seeds {
                println!(
                    "seed {}: test accuracy (EMA) {}%",
                    seed.seed,
                    percent(seed.test_acc_ema)
                );
            }
            println!(
                "mean {} ± {} over {} seeds",
                percent(s.mean),
                percent(s.std),
                s.seeds.len()
            );
        }
        Command::Run {
            config: None,
            resume: None,
            ..
        } => unreachable!("clap requires --config or --resume"),
        Command::Compare {
            config,
            policies,
            out,
        } => {
            for (p, s) in compare_policies(&load(&config, out)?, &policies)? {
                println!("{p:<16} {} ± {}", percent(s.mean), percent(s.std));
            }
        }
        Command::SweepLambda {
            config,
            values,
            out,
        } => {
            for r in lambda_sweep(&load(&config, out)?, &values)? {
                println!(
                    "lambda {:<8e} {} ± {}",
                    r.lambda,
                    percent(r.mean),
                    percent(r.std)
                );
            }
        }
        Command::ExportData { config, out } => {
            for p in export_data(&load(&config, out)?)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command).context("normatch failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e:#}");
            let config = e
                .downcast_ref::<Error>()
                .is_some_and(Error::is_config_error);
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}
