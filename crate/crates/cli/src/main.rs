use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use frontlab_cli::manifest::{execute, rerun};
use frontlab_cli::{exit_code, verdict_code, Experiment, ExperimentConfig, Task};

#[derive(Parser)]
#[command(name = "frontlab", version, about = "Front propagation in random media: solvers, Monte Carlo and experiments")]
struct Cli {
    /// Sectioned TOML config; defaults are used for anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces experiment.seeds with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV files and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run even if a precondition fails; the verdict is then marked unsupported.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the potential on a grid.
    Potential,
    /// Solve PAM or F-KPP; writes front positions and the final field.
    Solve,
    /// Front positions and widths over time.
    Fronts,
    /// Feynman-Kac Monte Carlo estimate of u(t, x).
    McU,
    /// Lyapunov exponent curve and its root v0.
    Lyapunov,
    /// Hitting-time log-MGF and its derivative on mc.etas.
    Mgf,
    /// McKean estimate of w(t, x) from branching Brownian motion.
    BbmreW,
    /// Coupling replicates at the first coupling.lambdas entry.
    Couple,
    /// Run a named experiment.
    Exp { name: Experiment },
    /// Re-execute a manifest and compare CSV hashes.
    Rerun { manifest: PathBuf },
    /// Print the effective configuration.
    Config,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.experiment.seeds = vec![s];
    }
    let task = match cli.command {
        Command::Potential => Task::Potential,
        Command::Solve => Task::Solve,
        Command::Fronts => Task::Fronts,
        Command::McU => Task::McU,
        Command::Lyapunov => Task::Lyapunov,
        Command::Mgf => Task::Mgf,
        Command::BbmreW => Task::BbmreW,
        Command::Couple => Task::Couple,
        Command::Exp { name } => Task::Exp(name),
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            return Ok(0);
        }
        Command::Rerun { manifest } => {
            let report = rerun(&manifest, &cli.out)?;
            for (file, same) in &report.files {
                println!("{file}: {}", if *same { "identical" } else { "DIFFERS" });
            }
            return Ok(if report.identical() { 0 } else { frontlab_cli::EXIT_VERDICT });
        }
    };
    let manifest = execute(task, &cfg, cli.force, &cli.out)?;
    for o in &manifest.outputs {
        println!("{}", cli.out.join(&o.file).display());
    }
    if let Some(v) = &manifest.verdict {
        println!("{}: {} ({})", v.name, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    Ok(verdict_code(manifest.verdict.as_ref()))
}
