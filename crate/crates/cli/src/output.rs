//! Output directory bookkeeping: CSV tables, the manifest and `report.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

pub const REPORT_FILE: &str = "report.json";

/// Provenance fields embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunHeader {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config_sha256: String,
    /// The command block as parsed, defaults filled in.
    pub config: Value,
}

pub struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    /// Writes `rows` with a header row. Empty tables are refused so that
    /// every file in the manifest has content.
    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<()> {
        if rows.is_empty() {
            return Err(CliError::Config(format!("table {name} would be empty")));
        }
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `report.json` and returns its path. The manifest lists every
    /// file written in this run, the report included.
    pub fn finish(mut self, header: RunHeader, results: Value) -> CliResult<PathBuf> {
        self.files.push(REPORT_FILE.to_string());
        let report = json!({
            "run": header,
            "manifest": self.files,
            "results": results,
        });
        let path = self.dir.join(REPORT_FILE);
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
