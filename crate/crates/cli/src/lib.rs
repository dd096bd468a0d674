//! Experiment harness: configuration, orchestration and artifact export for
//! the `molcomm` binary.

pub mod config;
pub mod experiments;
pub mod output;

use std::fmt;

use clap::ValueEnum;

use config::ExperimentConfig;
use output::{Artifacts, Manifest};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] molcomm::Error),
    #[error("output error: {0}")]
    Output(String),
    #[error("{0}")]
    Run(String),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Simulate,
    Fit,
    Impulse,
    Estimate,
    Crlb,
    Table2,
    Table4,
    Fig4,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.to_possible_value().expect("no skipped variants");
        f.write_str(s.get_name())
    }
}

/// Runs one subcommand and writes its artifacts plus `manifest.json` into
/// the configured output directory.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<Manifest, HarnessError> {
    cfg.validate()?;
    let mut out = Artifacts::new(&cfg.out_dir)?;
    let mut failures = Vec::new();
    match command {
        Command::Simulate => experiments::simulate(cfg, &mut out)?,
        Command::Fit => {
            experiments::fit(cfg, &mut out)?;
        }
        Command::Impulse => experiments::impulse(cfg, &mut out)?,
        Command::Table2 => {
            let t = experiments::table2(cfg)?;
            experiments::write_table2(&mut out, &t)?;
            failures = t.failures;
        }
        Command::Table4 | Command::Estimate | Command::Crlb | Command::Fig4 => {
            let cal = experiments::calibrate(cfg)?;
            out.json("calibration.json", &cal)?;
            if let Some(t) = &cal.grid {
                failures.extend(t.failures.iter().cloned());
            }
            let more = match command {
                Command::Table4 => {
                    let (cells, f) = experiments::table4(cfg, cal.params)?;
                    experiments::write_table4(&mut out, &cells)?;
                    f
                }
                Command::Estimate => experiments::estimate(cfg, cal.params, &mut out)?,
                Command::Crlb => experiments::crlb(cfg, cal.params, &mut out)?,
                _ => {
                    let (rows, f) = experiments::fig4(cfg, cal.params)?;
                    experiments::write_fig4(&mut out, &rows)?;
                    f
                }
            };
            failures.extend(more);
        }
    }
    out.finish(&command.to_string(), cfg.hash(), cfg.seed, failures)
}
