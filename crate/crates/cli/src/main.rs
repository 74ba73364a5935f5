use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde_json::Value;
use z2_cli::output::Artifacts;
use z2_cli::{run_command, thread_count, thread_pool, CliError, Command, ExperimentConfig, THREADS_ENV};

#[derive(Debug, Parser)]
#[command(name = "z2", version, about = "Zigzag sampling collapse experiments on analytic score fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; the built-in two-mode flow experiment if absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path prefix; overrides the config's `output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let prefix = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output));
    let threads = thread_count(std::env::var(THREADS_ENV).ok().as_deref())?;
    let pool = thread_pool(threads)?;

    let started = Instant::now();
    let mut outcome = run_command(&cli.command, &cfg, &pool)?;
    let elapsed = started.elapsed().as_secs_f64();
    let passed = outcome.passed();

    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let summary = &mut outcome.summary;
    summary.insert("command".into(), cli.command.name().into());
    summary.insert("seed".into(), cfg.seed.into());
    summary.insert("threads".into(), threads.into());
    summary.insert("passed".into(), passed.into());
    summary.insert("failures".into(), outcome.failures.clone().into());
    summary.insert("wall_clock_seconds".into(), elapsed.into());
    summary.insert("timestamp_unix".into(), stamp.into());

    let artifacts = Artifacts::new(&prefix);
    artifacts.write(&outcome.steps, &outcome.fits, &Value::Object(outcome.summary.clone()))?;

    for line in &outcome.report {
        println!("{line}");
    }
    for f in &outcome.failures {
        eprintln!("FAIL: {f}");
    }
    println!(
        "{}: {} ({})",
        cli.command.name(),
        if passed { "pass" } else { "FAIL" },
        artifacts.summary.display()
    );
    Ok(passed)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
