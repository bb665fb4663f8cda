//! Artifact writing: every file names the tool version and the config hash.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
}

pub struct Output {
    dir: PathBuf,
    meta: Meta,
}

/// A CSV field; floats carry 17 significant digits.
pub enum Cell {
    F(f64),
    U(u64),
    I(i64),
    S(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) => format!("{v:.16e}"),
            Cell::U(v) => v.to_string(),
            Cell::I(v) => v.to_string(),
            Cell::S(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::U(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::U(v as u64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::I(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::S(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    meta: &'a Meta,
    result: &'a T,
}

impl Output {
    pub fn new(dir: &Path, command: &str, canonical_config: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        let hash = Sha256::digest(canonical_config.as_bytes());
        let config_sha256 = hash.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Output {
            dir: dir.to_path_buf(),
            meta: Meta {
                tool: "vicl",
                version: VERSION,
                command: command.to_string(),
                config_sha256,
            },
        })
    }

    pub fn json<T: Serialize>(&self, name: &str, result: &T) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(&Envelope {
            meta: &self.meta,
            result,
        })
        .map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(self.dir.join(name), body + "\n")?;
        Ok(())
    }

    /// CSV preceded by a `#` comment line carrying the metadata.
    pub fn csv<I>(&self, name: &str, header: &[String], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<Cell>>,
    {
        let mut buf = format!(
            "# {} {} {} config_sha256={}\n",
            self.meta.tool, self.meta.version, self.meta.command, self.meta.config_sha256
        )
        .into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let io = |e: csv::Error| CliError::Io(e.to_string());
            w.write_record(header).map_err(io)?;
            for row in rows {
                if row.len() != header.len() {
                    return Err(CliError::Io(format!("{name}: row width differs from header")));
                }
                w.write_record(row.iter().map(Cell::render)).map_err(io)?;
            }
            w.flush()?;
        }
        std::fs::write(self.dir.join(name), buf)?;
        Ok(())
    }
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// `prefix_1 .. prefix_n`.
pub fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}
