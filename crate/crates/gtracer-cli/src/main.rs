//! `gtracer` command-line interface: train, sweep, diagnose, compare.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gtracer_core::harness::{
    diagnose, run_to_dir, sweep, ExperimentConfig, ReplicateSummary,
};

#[derive(Parser)]
#[command(name = "gtracer", version, about = "Curvature-regularized optimizer experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every replicate seed of a config and persist metrics,
    /// checkpoints, and a summary under its output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep one hyperparameter (rho, rho_sam, lr, beta, delta) over a
    /// comma-separated value list.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Run loss-geometry diagnostics at a trained checkpoint.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print a joint table over finished run directories.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load(config: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::from_path(config)
        .with_context(|| format!("loading config {}", config.display()))
}

fn fmt_pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.2}%", 100.0 * v)).unwrap_or_else(|| "-".into())
}

fn print_summary(s: &ReplicateSummary) {
    println!(
        "{:<12} n={} failed={} final={} ± {} best={} ± {}",
        s.optimizer,
        s.n_replicates,
        s.n_failed,
        fmt_pct(s.mean_final_test_accuracy),
        fmt_pct(s.std_error_final_test_accuracy),
        fmt_pct(s.mean_best_test_accuracy),
        fmt_pct(s.std_error_best_test_accuracy),
    );
}

fn run() -> Result<u8> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { config } => {
            let cfg = load(&config)?;
            let summary = run_to_dir(&cfg)?;
            for per in &summary.per_seed {
                println!(
                    "seed {:<6} status={:?} epochs={} final={} wall={:.1}s",
                    per.seed,
                    per.status,
                    per.epochs_completed,
                    fmt_pct(per.final_test_accuracy),
                    per.wall_clock_seconds,
                );
            }
            print_summary(&summary);
            println!("artifacts in {}", cfg.output_dir.display());
            Ok(if summary.n_failed > 0 { 1 } else { 0 })
        }
        Cmd::Sweep { config, param, values } => {
            let cfg = load(&config)?;
            let table = sweep(&cfg, &param, &values)?;
            println!("value,n,n_failed,mean_accuracy,std_error");
            for row in &table.rows {
                println!(
                    "{},{},{},{},{}",
                    row.value,
                    row.n,
                    row.n_failed,
                    row.mean_accuracy.map(|v| v.to_string()).unwrap_or_default(),
                    row.std_error.map(|v| v.to_string()).unwrap_or_default(),
                );
            }
            if let Some(best) = table.best_value() {
                println!("# best {param} by mean accuracy: {best}");
            }
            println!("# table written to {}", cfg.output_dir.join("sweep.csv").display());
            Ok(0)
        }
        Cmd::Diagnose { config, checkpoint } => {
            let cfg = load(&config)?;
            let report = diagnose(&cfg, &checkpoint)?;
            let text = serde_json::to_string_pretty(&report)?;
            let out = cfg.output_dir.join("diagnostics.json");
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, &text)?;
            println!("{text}");
            eprintln!("# written to {}", out.display());
            Ok(0)
        }
        Cmd::Compare { runs } => {
            println!(
                "{:<28} {:<12} {:>3} {:>6} {:>18} {:>18}",
                "run", "optimizer", "n", "failed", "final acc ± se", "best acc ± se"
            );
            for dir in &runs {
                let path = dir.join("summary.json");
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let s: ReplicateSummary = serde_json::from_str(&text)?;
                println!(
                    "{:<28} {:<12} {:>3} {:>6} {:>8} ± {:<7} {:>8} ± {:<7}",
                    dir.display().to_string(),
                    s.optimizer,
                    s.n_replicates,
                    s.n_failed,
                    fmt_pct(s.mean_final_test_accuracy),
                    fmt_pct(s.std_error_final_test_accuracy),
                    fmt_pct(s.mean_best_test_accuracy),
                    fmt_pct(s.std_error_best_test_accuracy),
                );
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
