use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use molcomm_cli::config::{ExperimentConfig, Overrides};
use molcomm_cli::{run, Command};

/// Molecular-communication channel experiments.
#[derive(Debug, Parser)]
#[command(name = "molcomm", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tx-Rx distance [µm]; narrows grids to this value.
    #[arg(long = "d")]
    distance: Option<f64>,
    /// Receiver radius [µm].
    #[arg(long = "R")]
    rx_radius: Option<f64>,
    /// Diffusion coefficient [µm²/s].
    #[arg(long = "D")]
    diffusion: Option<f64>,
    /// Number of samples.
    #[arg(long = "M")]
    m: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    };
    let cfg = cfg.and_then(|mut c| {
        c.apply(&Overrides {
            seed: cli.seed,
            out: cli.out.clone(),
            distance: cli.distance,
            rx_radius: cli.rx_radius,
            diffusion: cli.diffusion,
            m: cli.m,
        })?;
        Ok(c)
    });
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command, &cfg) {
        Ok(m) if m.failures.is_empty() => {
            println!("{}: wrote {} artifacts to {}", cli.command, m.artifacts.len(), cfg.out_dir.display());
            ExitCode::SUCCESS
        }
        Ok(m) => {
            for f in &m.failures {
                eprintln!("failed: {f}");
            }
            println!("{}: wrote {} artifacts with {} failures", cli.command, m.artifacts.len(), m.failures.len());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
