use breathers::harness::{self, ExperimentConfig};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "breathers", version, about = "Whiskered invariant tori of coupled pendulum lattices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for states and tables.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads. Accepted for compatibility; kernels run on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Seed for the random guess perturbations.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Converged single-site breather at zero coupling.
    SingleSite,
    /// Continue the single-site breather through the coupling schedule.
    Continue,
    /// Separation scan of two breathers and the coupled two-frequency torus.
    Couple,
    /// Multi-frequency cascade.
    Cascade,
    /// Diophantine report of the configured frequency sequence.
    CheckFrequency,
    /// Axiom check of the configured decay profile.
    CheckDecay,
    /// Recompute every diagnostic of a state file.
    Diagnose {
        state: PathBuf,
    },
}

fn print<V: Serialize>(v: &V) -> breathers::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> breathers::Result<bool> {
    let load = || -> breathers::Result<ExperimentConfig> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::from_toml("[model]\n")?,
        };
        cfg.seed = cli.seed;
        Ok(cfg)
    };
    match &cli.command {
        Command::SingleSite => {
            let st = harness::cmd_single_site(&load()?, &cli.out)?;
            print(&st.diagnostics)?;
        }
        Command::Continue => print(&harness::cmd_continue(&load()?, &cli.out)?)?,
        Command::Couple => print(&harness::cmd_couple(&load()?, &cli.out)?)?,
        Command::Cascade => print(&harness::cmd_cascade(&load()?, &cli.out)?)?,
        Command::CheckFrequency => {
            let reports = harness::cmd_check_frequency(&load()?)?;
            print(&reports)?;
            return Ok(reports.iter().all(|r| !r.resonant));
        }
        Command::CheckDecay => {
            let report = harness::cmd_check_decay(&load()?)?;
            print(&report)?;
            return Ok(report.pass);
        }
        Command::Diagnose { state } => {
            let report = harness::cmd_diagnose(state)?;
            print(&report)?;
            return Ok(report.ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 1 {
        eprintln!("note: --threads {} requested; running single threaded", cli.threads);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
