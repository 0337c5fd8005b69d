use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nulledit_cli::{cmd_run, cmd_sweep, cmd_verify, Overrides};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  verify: a required check failed
  2  configuration error (parse errors report line:column, validation errors the field path)
  3  run aborted on a numerically singular update (trace.csv carries aborted_at)
  4  numerical or I/O failure

Environment:
  NULLEDIT_THREADS  caps the number of worker threads used by `sweep`";

#[derive(Parser)]
#[command(name = "nulledit", version, about = "Sequential closed-form editing of synthetic linear memories")]
#[command(after_help = EXIT_CODES)]
struct Cli {
    /// Override stream.seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override metrics_every from the config.
    #[arg(long = "metrics-every", global = true)]
    metrics_every: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one edit sequence and write trace.csv and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a verification suite: oracle, projector, theorem1 or leakage.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Custom experiment config (theorem1 only).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sweep lambda1, tau or keep_ratio over comma-separated values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// For tau, `T` means the configured number of edits.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let overrides = Overrides {
        seed: cli.seed,
        metrics_every: cli.metrics_every,
    };
    let status = match &cli.command {
        Command::Run { config, out } => cmd_run(config, out, &overrides),
        Command::Verify { suite, out, config } => cmd_verify(suite, out, config.as_deref(), &overrides),
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => cmd_sweep(config, param, values, out, &overrides),
    };
    ExitCode::from(status.code() as u8)
}
