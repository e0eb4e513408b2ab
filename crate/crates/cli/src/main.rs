use std::path::PathBuf;
use std::process::ExitCode;

use chmc_cli::commands::{self, Fault, RunOptions};
use chmc_cli::{CliError, ExperimentConfig, ModelId};
use clap::{Args, Parser, Subcommand};

/// Constrained HMC experiments.
#[derive(Parser)]
#[command(name = "chmc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (defaults to the available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Mean acceptance over a (sampler, σ, ε) grid at fixed step size.
    Heatmap(Common),
    /// Adapted runs over (sampler, σ, seed set): min bulk ESS, max R̂, step size.
    EssSweep(Common),
    /// Derivative and oracle checks for a shipped model.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Model id, or `all`.
        #[arg(long)]
        model: String,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// One adapted run of the first configured sampler at the first σ.
    Sample(Common),
}

fn load(common: &Common, required: bool) -> Result<(ExperimentConfig, RunOptions), CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if required => return Err(CliError::Usage("--config is required".into())),
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    let workers = match common.workers {
        Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let opts = RunOptions { out_dir: cfg.out_dir.clone(), workers };
    Ok((cfg, opts))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Heatmap(c) => {
            let (cfg, opts) = load(&c, true)?;
            let rows = commands::heatmap(&cfg, &opts)?;
            println!("heatmap: {} cells -> {}", rows.len(), opts.out_dir.join("heatmap.csv").display());
        }
        Command::EssSweep(c) => {
            let (cfg, opts) = load(&c, true)?;
            let rows = commands::ess_sweep(&cfg, &opts)?;
            for r in &rows {
                println!(
                    "{} {} sigma={} set={} min_ess={:.1} max_rhat={:.3} ess/s={:.3}",
                    r.model, r.sampler, r.sigma, r.seed_set, r.min_bulk_ess, r.max_rhat, r.min_ess_per_second
                );
            }
        }
        Command::Sample(c) => {
            let (cfg, opts) = load(&c, true)?;
            let report = commands::sample(&cfg, &opts)?;
            for q in &report.quantities {
                println!("{:>10} mean={:.4} sd={:.4} ess={:.0} rhat={:.3}", q.name, q.mean, q.sd, q.bulk_ess, q.rhat);
            }
        }
        Command::Validate { common, model, inject_fault } => {
            let (cfg, opts) = load(&common, false)?;
            let ids = match model.trim() {
                "" => return Err(CliError::Usage("--model must name a model".into())),
                "all" => ModelId::ALL.to_vec(),
                s => vec![ModelId::parse(s)?],
            };
            let fault = inject_fault.as_deref().map(Fault::parse).transpose()?;
            let rows = commands::validate_command(&cfg, &ids, fault, &opts)?;
            for r in &rows {
                println!("PASS {} [{}] {}: {:e} <= {:e}", r.model, r.point, r.check, r.value, r.tolerance);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("chmc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
