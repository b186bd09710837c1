use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use ldpnn::experiments::{run, Experiment, ExperimentConfig, RunError};

/// Large-deviation rate functions for wide Bayesian neural networks.
#[derive(Debug, Parser)]
#[command(name = "ldpnn", version)]
struct Cli {
    /// One of 01a, 01b, 01c, 02a, 02b, 02c, 03a, 03b, rate, oracle.
    experiment: Experiment,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, env = "LDPNN_THREADS")]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(cli: Cli) -> Result<(), RunError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(RunError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunError::Config(e.to_string()))?;
    }
    let mut cfg = ExperimentConfig::from_file(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cli.experiment.name()));
    let start = Instant::now();
    let report = run(cli.experiment, &cfg, &out)?;
    eprintln!(
        "{}: wrote {} files to {} in {:.1}s",
        cli.experiment,
        report.files.len(),
        out.display(),
        start.elapsed().as_secs_f64()
    );
    if !report.failures.is_empty() {
        for f in &report.failures {
            eprintln!("  {f}");
        }
        return Err(RunError::NotConverged(format!("{} point(s) failed", report.failures.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
