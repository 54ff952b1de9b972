use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};

use bridgeflow::commands::{self, RunContext};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Check,
    Bridge,
    Train,
    Rollout,
    Eval,
}

/// Steer distributions through linear control systems with bridge-based
/// flow matching.
#[derive(Debug, Parser)]
#[command(name = "bridgeflow", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on this value.
    #[arg(long, env = "BRIDGEFLOW_THREADS")]
    threads: Option<usize>,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let ctx = RunContext::load(&cli.config, cli.out, cli.seed)?;
    let files = match cli.command {
        Command::Check => {
            let report = commands::cmd_check(&ctx)?;
            println!("system: {}", report.system);
            println!("{}", report.rank);
            println!("gramian condition number (t = 1): {:.6e}", report.gramian_condition);
            if report.controllable() {
                println!("verdict: controllable");
                return Ok(ExitCode::SUCCESS);
            }
            println!("verdict: not controllable");
            return Ok(ExitCode::from(2));
        }
        Command::Bridge => commands::cmd_bridge(&ctx)?,
        Command::Train => commands::cmd_train(&ctx)?,
        Command::Rollout => commands::cmd_rollout(&ctx)?,
        Command::Eval => commands::cmd_eval(&ctx)?,
    };
    println!("run {}", ctx.run_id);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
