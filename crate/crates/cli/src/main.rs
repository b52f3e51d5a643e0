use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spde_averaging::{parse_config, run, ExperimentKind, Parallel};

#[derive(Parser)]
#[command(name = "spde-avg", version, about = "Slow-fast SPDE averaging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `sim.replicas`.
    #[arg(long)]
    replicas: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing hypotheses and invariants on a system.
    Validate(Common),
    /// Moments and contraction of the fast equation.
    Fast(Common),
    /// Samples of the invariant measure.
    Invariant(Common),
    /// Replicas of the coupled system.
    Coupled(Common),
    /// The averaged equation.
    Average(Common),
    /// Convergence table over the ε grid.
    Converge(Common),
    /// Remainder decay over the ε grid.
    Remainder(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Validate(a) => (ExperimentKind::Validate, a),
        Command::Fast(a) => (ExperimentKind::Fast, a),
        Command::Invariant(a) => (ExperimentKind::Invariant, a),
        Command::Coupled(a) => (ExperimentKind::Coupled, a),
        Command::Average(a) => (ExperimentKind::Average, a),
        Command::Converge(a) => (ExperimentKind::Converge, a),
        Command::Remainder(a) => (ExperimentKind::Remainder, a),
    };
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(1);
        }
    };
    let mut spec = match parse_config(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}:{e}", args.config.display());
            return ExitCode::from(if e.is_hypothesis_violation() { 2 } else { 1 });
        }
    };
    spec.kind = kind;
    if let Some(s) = args.seed {
        spec.sim.seed = s;
    }
    if let Some(o) = args.out {
        spec.output = o.to_string_lossy().into_owned();
    }
    if let Some(n) = args.replicas {
        spec.sim.replicas = n;
    }
    let exec = match Parallel::new(args.threads) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&spec, &exec) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if outcome.all_passed() {
                ExitCode::SUCCESS
            } else {
                let failed: Vec<&str> = outcome.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                eprintln!("validation failed: {}", failed.join(", "));
                ExitCode::from(3)
            }
        }
        Err(e) => {
            if e.exit_code() == 2 {
                eprintln!("error: {e} (the fast reaction must satisfy L_g < λ)");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
