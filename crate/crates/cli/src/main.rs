use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, LevelFilter};
use rayon::prelude::*;

use sfuda_core::adapt::{ablate, median_by_cell, run_adaptation, train_source};
use sfuda_core::data::{generate_domain_pair, write_dataset_csv};
use sfuda_core::gradcheck::{run_gradient_checks, Fault, TOLERANCE};
use sfuda_core::model::save_checkpoint;
use sfuda_core::report::{write_ablation_summary, write_metrics_csv, RunSummary};
use sfuda_core::RunConfig;

#[derive(Parser)]
#[command(name = "sfuda", version, about = "Source-free domain adaptation on synthetic 2-D shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and target sets as CSV.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source model and save a checkpoint.
    TrainSource {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full adaptation run per seed: metrics CSV and summary per seed.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write each seed's dataset CSV.
        #[arg(long)]
        dump_data: bool,
        /// Also write each seed's adapted model checkpoint.
        #[arg(long)]
        save_model: bool,
    },
    /// Ablation grid: component rows, loss/weighting variants, history sweep.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference checks of every analytic gradient.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn init_logging() {
    let level = match std::env::var("SFUDA_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Off,
        Ok("debug") => LevelFilter::Debug,
        _ => LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn adapt_cmd(config: &RunConfig, seeds: &[u64], out_dir: &Path, dump_data: bool, save_model: bool) -> Result<()> {
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    create_dir(out_dir)?;
    let results: Vec<_> = seeds
        .par_iter()
        .map(|&seed| {
            let config = RunConfig { seed, ..config.clone() };
            run_adaptation(&config).map(|r| (config, r))
        })
        .collect::<std::result::Result<_, _>>()?;
    for (config, result) in &results {
        let seed = config.seed;
        write_metrics_csv(&out_dir.join(format!("metrics_seed{seed}.csv")), &result.metrics)?;
        RunSummary::new(result, config).write(&out_dir.join(format!("summary_seed{seed}.toml")))?;
        if dump_data {
            let pair = generate_domain_pair(&config.data, seed)?;
            write_dataset_csv(&out_dir.join(format!("data_seed{seed}.csv")), &pair)?;
        }
        if save_model {
            save_checkpoint(&out_dir.join(format!("model_seed{seed}.ckpt")), &result.online, seed)?;
        }
        info!(
            "seed {seed}: target accuracy {:.4} -> {:.4} in {:.1}s",
            result.source_only_target_accuracy,
            result.final_target_accuracy(),
            result.wall_time.as_secs_f64()
        );
    }
    Ok(())
}

fn ablate_cmd(config: &RunConfig, seeds: &[u64], out_dir: &Path) -> Result<()> {
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    create_dir(out_dir)?;
    let runs = ablate(config, seeds)?;
    for run in &runs {
        let name = format!("{}_seed{}.csv", run.cell, run.result.seed);
        write_metrics_csv(&out_dir.join(name), &run.result.metrics)?;
    }
    write_ablation_summary(&out_dir.join("summary.csv"), &runs)?;
    for (cell, acc) in median_by_cell(&runs) {
        println!("{cell:<24} {acc:.4}");
    }
    Ok(())
}

fn grad_check_cmd(trials: usize, seed: u64, inject_fault: bool) -> Result<bool> {
    let fault = if inject_fault { Fault::Offset } else { Fault::None };
    let reports = run_gradient_checks(trials, seed, fault)?;
    let mut ok = true;
    for r in &reports {
        let status = if r.passes() { "ok" } else { "FAIL" };
        ok &= r.passes();
        println!(
            "{:<40} trials {:>4}  max rel err {:.3e}  {status}",
            r.name, r.trials, r.worst.max_relative_error
        );
    }
    println!("tolerance {TOLERANCE:e}");
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let config = load_config(config.as_deref())?;
            let pair = generate_domain_pair(&config.data, seed)?;
            write_dataset_csv(&out, &pair).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::TrainSource { config, seed, out } => {
            let config = load_config(config.as_deref())?;
            let pair = generate_domain_pair(&config.data, seed)?;
            let model = train_source(&config.model_config(), &config.source, &pair.source, seed)?;
            save_checkpoint(&out, &model, seed).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Adapt {
            config,
            seeds,
            out_dir,
            dump_data,
            save_model,
        } => adapt_cmd(&load_config(config.as_deref())?, &seeds, &out_dir, dump_data, save_model)?,
        Command::Ablate { config, seeds, out_dir } => ablate_cmd(&load_config(config.as_deref())?, &seeds, &out_dir)?,
        Command::GradCheck {
            trials,
            seed,
            inject_fault,
        } => return grad_check_cmd(trials, seed, inject_fault),
    }
    Ok(true)
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
