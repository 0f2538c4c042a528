use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use prdim::checkpoint::Checkpoint;
use prdim::config::load_config;
use prdim::data::{load_csv, to_csv};
use prdim::eval::compute_metrics;
use prdim::pipeline::{impute_with_checkpoint, run_masks, run_pipeline};
use prdim::seed::stage_rng;
use prdim::{Error, Result};

/// Diffusion imputation guided by a missing-pattern recognizer.
///
/// Log verbosity follows `PRDIM_LOG` (e.g. `PRDIM_LOG=debug`).
#[derive(Parser)]
#[command(name = "prdim", version)]
struct Cli {
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for sampling (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full experiment from a TOML config.
    Run { config: PathBuf },
    /// Impute a CSV with a saved model.
    Impute {
        checkpoint: PathBuf,
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// The CSV has no header row.
        #[arg(long)]
        no_header: bool,
        #[arg(long, default_value = "NaN")]
        missing_token: String,
    },
    /// Generate masks only and report missing ratios.
    Masks { config: PathBuf },
    /// Metrics between two CSVs over the missing entries of a mask CSV.
    Metrics {
        truth: PathBuf,
        pred: PathBuf,
        mask: PathBuf,
        /// Treat mask entries equal to 1 as the entries to score, instead of
        /// reading the file as an observed mask and scoring its zeros.
        #[arg(long)]
        eval_mask: bool,
        /// The CSVs start with a header row.
        #[arg(long)]
        header: bool,
    },
}

fn apply_overrides(cli: &Cli, path: &PathBuf) -> Result<prdim::config::ExperimentConfig> {
    let mut cfg = load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Run { config } => {
            let cfg = apply_overrides(cli, config).map_err(|e| e.in_stage("config"))?;
            let out = run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out.report.metrics)?);
        }
        Command::Masks { config } => {
            let cfg = apply_overrides(cli, config).map_err(|e| e.in_stage("config"))?;
            let summary = run_masks(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Impute {
            checkpoint,
            csv,
            out,
            no_header,
            missing_token,
        } => {
            let ck = Checkpoint::load(checkpoint).map_err(|e| e.in_stage("load_checkpoint"))?;
            let ds = load_csv(csv, !no_header, missing_token).map_err(|e| e.in_stage("load_data"))?;
            let mut rng = stage_rng(cli.seed.unwrap_or(0), "impute", 0);
            let imputed = impute_with_checkpoint(&ck, &ds, &mut rng).map_err(|e| e.in_stage("impute"))?;
            std::fs::write(out, to_csv(&imputed, None, None)).map_err(|e| Error::io(out, e))?;
        }
        Command::Metrics {
            truth,
            pred,
            mask,
            eval_mask,
            header,
        } => {
            let load = |p: &PathBuf| load_csv(p, *header, "NaN").map_err(|e| e.in_stage("load_data"));
            let (t, p, m) = (load(truth)?, load(pred)?, load(mask)?);
            let sel = if *eval_mask { m.x.clone() } else { m.x.map(|v| 1.0 - v) };
            let report = compute_metrics(&t.x, &p.x, &sel).map_err(|e| e.in_stage("metrics"))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRDIM_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
