use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dkm_harness::commands::{cmd_ablate, cmd_evaluate, cmd_metatrain, cmd_pretrain, cmd_sweep, Invocation};
use dkm_harness::config::RunConfig;
use dkm_harness::{selftest, HarnessError, Result};

#[derive(Parser)]
#[command(name = "dkmap", version, about = "Cross-domain few-shot experiments with domain knowledge mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mixed-supervision pretraining on the source base classes.
    Pretrain(RunArgs),
    /// Episodic meta-training from a pretrain checkpoint.
    Metatrain(RunArgs),
    /// Meta-test a checkpoint on every target domain.
    Evaluate(RunArgs),
    /// Pretraining-regime ablation: supervised, ssl and mixed.
    Ablate(RunArgs),
    /// Full pipeline for every kappa of the sweep grid.
    Sweep(RunArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
    /// Force the difficulty score to zero at meta-test.
    #[arg(long)]
    rho_off: bool,
    /// Evaluation worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Checkpoint stem (with or without the .json extension).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn invocation(args: RunArgs) -> Result<Invocation> {
    let (mut config, config_bytes) = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = args
        .out
        .or_else(|| config.out.clone())
        .ok_or_else(|| HarnessError::config("out", "no run directory given (set `out` or pass --out)"))?;
    Ok(Invocation {
        config,
        config_bytes,
        out,
        force: args.force,
        rho_off: args.rho_off,
        parallel: args.parallel,
        checkpoint: args.checkpoint,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => {
            let path = cmd_pretrain(&invocation(a)?)?;
            println!("checkpoint {}", path.display());
        }
        Command::Metatrain(a) => {
            let path = cmd_metatrain(&invocation(a)?)?;
            println!("checkpoint {}", path.display());
        }
        Command::Evaluate(a) => cmd_evaluate(&invocation(a)?)?,
        Command::Ablate(a) => cmd_ablate(&invocation(a)?)?,
        Command::Sweep(a) => cmd_sweep(&invocation(a)?)?,
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(HarnessError::Invariant("selftest reported failures".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
