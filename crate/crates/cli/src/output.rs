//! Artifact writers. Every file written through [`Artifacts`] is hashed into
//! the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::HarnessError;

/// One CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl Cell {
    fn render(&self) -> Result<String, HarnessError> {
        match self {
            Cell::Num(v) if !v.is_finite() => Err(HarnessError::Output(format!("refusing to write non-finite value {v}"))),
            Cell::Num(v) => Ok(format!("{v}")),
            Cell::Int(v) => Ok(v.to_string()),
            Cell::Text(s) => Ok(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<ArtifactEntry>,
    pub failures: Vec<String>,
}

pub struct Artifacts {
    dir: PathBuf,
    written: Vec<ArtifactEntry>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Output(format!("{}: {e}", path.display()))
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, name: &str, bytes: Vec<u8>) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
        self.written.retain(|a| a.file != name);
        self.written.push(ArtifactEntry {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| io_err(Path::new(name), e))?;
        for row in rows {
            if row.len() != header.len() {
                return Err(HarnessError::Output(format!(
                    "{name}: row has {} cells, header has {}",
                    row.len(),
                    header.len()
                )));
            }
            let cells = row.iter().map(Cell::render).collect::<Result<Vec<_>, _>>()?;
            w.write_record(&cells).map_err(|e| io_err(Path::new(name), e))?;
        }
        let bytes = w.into_inner().map_err(|e| io_err(Path::new(name), e))?;
        self.record(name, bytes)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), HarnessError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| io_err(Path::new(name), e))?;
        bytes.push(b'\n');
        self.record(name, bytes)
    }

    /// Writes `manifest.json` listing every artifact in write order.
    pub fn finish(self, command: &str, config_sha256: String, seed: u64, failures: Vec<String>) -> Result<Manifest, HarnessError> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256,
            seed,
            artifacts: self.written,
            failures,
        };
        let path = self.dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| io_err(&path, e))?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        Ok(manifest)
    }
}
