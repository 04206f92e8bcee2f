//! Batch command-line pipeline: signal generation, synthetic device
//! capture, model training, evaluation, and gradient checking.
//!
//! Exit codes: 0 success, 1 failed check, 2 configuration error,
//! 3 numeric failure, 4 I/O or file-format error.

mod commands;

use aclstm_core::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "aclstm", version, about = "Power-amplifier behavioral modeling pipeline")]
struct Cli {
    /// key=value configuration file ('#' comments allowed)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override (config key `seed`)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Force single-context execution for bit-exact reproducibility
    #[arg(long, global = true)]
    deterministic: bool,

    /// Numeric precision override (config key `precision`)
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,

    /// Output directory (created if missing)
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the OFDM excitation waveform and its plan file
    Gen,
    /// Drive the synthetic device and write the captured dataset
    Capture,
    /// Train the configured model family and write weights + history
    Train,
    /// Evaluate weights on the test split and write metrics + PSD CSVs
    Eval {
        /// ACW1 weights file (defaults to the configured weights path)
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Compare analytic gradients against central finite differences
    Gradcheck,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io(_) | Error::Format { .. } | Error::Mismatch(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = match commands::RunContext::prepare(
        cli.config.as_deref(),
        cli.seed,
        cli.deterministic,
        cli.precision.as_deref(),
        &cli.out,
    ) {
        Ok(ctx) => ctx,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(exit_code_for(&err));
        }
    };

    let result = match &cli.command {
        Command::Gen => commands::cmd_gen(&ctx),
        Command::Capture => commands::cmd_capture(&ctx),
        Command::Train => commands::cmd_train(&ctx),
        Command::Eval { weights } => commands::cmd_eval(&ctx, weights.as_deref()),
        Command::Gradcheck => commands::cmd_gradcheck(&ctx),
    };

    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
