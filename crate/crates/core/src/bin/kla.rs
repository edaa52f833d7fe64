//! `kla plan|verify|mix|sample`: flag parsing only; the work happens in
//! [`kla::runner`].

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kla::runner::{exit_code_for, run, Command, Overrides, RunConfig, Setting};

#[derive(Parser)]
#[command(
    name = "kla",
    version,
    about = "Adjusted kinetic Langevin sampling with coupling diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Derive the epoch plan and its certificates.
    Plan(Flags),
    /// Run diagnostic suites.
    Verify(Flags),
    /// Estimate mixing with coupled epoch runs.
    Mix(Flags),
    /// Run plain MAKLA or UKLA chains.
    Sample(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// iso_gauss, diag_gauss or perturbed.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    /// Smoothness constant of iso_gauss.
    #[arg(long = "L")]
    l: Option<f64>,
    /// Step size or `auto`.
    #[arg(long)]
    h: Option<String>,
    /// Friction or `auto`.
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Suite to run under `verify`; repeatable.
    #[arg(long = "suite")]
    suites: Vec<String>,
    /// Multiplier on the contraction rate in the contraction suite.
    #[arg(long)]
    contraction_scale: Option<f64>,
}

fn setting(flag: &str, raw: Option<String>) -> Result<Option<Setting>, String> {
    raw.map(|s| s.parse::<Setting>().map_err(|e| format!("--{flag}: {e}")))
        .transpose()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match cli.command {
        Cmd::Plan(f) => (Command::Plan, f),
        Cmd::Verify(f) => (Command::Verify, f),
        Cmd::Mix(f) => (Command::Mix, f),
        Cmd::Sample(f) => (Command::Sample, f),
    };
    let settings =
        setting("h", flags.h).and_then(|h| setting("gamma", flags.gamma).map(|g| (h, g)));
    let (h, gamma) = match settings {
        Ok(pair) => pair,
        Err(msg) => {
            eprintln!("kla: {msg}");
            return ExitCode::from(2);
        }
    };
    let overrides = Overrides {
        seed: flags.seed,
        threads: flags.threads,
        out: flags.out,
        model: flags.model,
        dim: flags.dim,
        l: flags.l,
        h,
        gamma,
        eps: flags.eps,
        replicas: flags.replicas,
        suites: flags.suites,
        contraction_scale: flags.contraction_scale,
    };
    let result =
        RunConfig::load(flags.config.as_deref(), &overrides).and_then(|cfg| run(command, &cfg));
    match result {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(err) => {
            eprintln!("kla: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
