use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gradstack_cli::config::{ExperimentConfig, RawConfig};
use gradstack_cli::{check, report, run, CliError};

#[derive(Parser)]
#[command(
    name = "gradstack",
    version,
    about = "Train, pretrain and tune feedforward networks from flat config files"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the mode selected in the config.
    Run(Common),
    /// Write summary, best-in-subset and learning-curve tables for a run directory.
    Report {
        /// Run directory (defaults to the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences at initialization.
    Gradcheck(Common),
    /// Single fit that divides the learning rate after each divergence.
    Retry(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `workers`.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `search.budget`.
    #[arg(long)]
    budget: Option<usize>,
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut raw = RawConfig::from_file(&c.config)?;
    if let Some(s) = c.seed {
        raw.set("seed", s.to_string());
    }
    if let Some(w) = c.workers {
        raw.set("workers", w.to_string());
    }
    if let Some(o) = &c.out {
        raw.set("out", o.display().to_string());
    }
    if let Some(b) = c.budget {
        raw.set("search.budget", b.to_string());
    }
    ExperimentConfig::from_raw(raw)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(c) => {
            let config = load(&c)?;
            let summary = run::run(&config)?;
            let failed = summary
                .trials
                .iter()
                .filter(|t| t.objective.is_none())
                .count();
            println!(
                "{} trials ({failed} failed), artifacts in {}",
                summary.trials.len(),
                config.out.display()
            );
            if let Some(b) = summary.best {
                println!(
                    "best trial {}: validation {}",
                    b.id,
                    b.objective.expect("ok trial")
                );
            }
        }
        Command::Report { out, config } => {
            let dir = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => ExperimentConfig::from_file(&c)?.out,
                (None, None) => return Err(CliError::config("report needs --out or --config")),
            };
            let files = report::report(&dir)?;
            println!(
                "wrote {}, {} and {} learning curves",
                files.summary.display(),
                files.subset_curve.display(),
                files.curves.len()
            );
        }
        Command::Gradcheck(c) => {
            let config = load(&c)?;
            let outcome = check::gradcheck(&config)?;
            check::write_outcome(&config, &outcome)?;
            for m in &outcome.models {
                println!(
                    "{}: max relative error {:.3e}, {} failing of {}",
                    m.name,
                    m.report.max_relative_error(),
                    m.report.failures().count(),
                    m.report.entries.len()
                );
            }
            if !outcome.sweep.is_empty() {
                print!("{}", outcome.sweep_table());
            }
            if !outcome.passed() {
                let failing: usize = outcome
                    .models
                    .iter()
                    .map(|m| m.report.failures().count())
                    .sum();
                return Err(CliError::GradientCheck(format!(
                    "{failing} coordinates out of tolerance"
                )));
            }
        }
        Command::Retry(c) => {
            let config = load(&c)?;
            let outcome = run::retry(&config)?;
            println!(
                "converged on attempt {} with learning rate {:e}: validation {}",
                outcome.attempts.len(),
                outcome.learning_rate,
                outcome.objective
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
