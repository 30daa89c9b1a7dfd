use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub var: String,
    pub values: Vec<f64>,
}

/// Everything needed to rerun a command and get the same bytes back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved configuration after defaults, config file and flags.
    pub config: Value,
    /// Base seed; run `i` of a sweep point uses `seed + i`.
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub systems: Vec<String>,
    pub sweep: Option<SweepSpec>,
    /// Command-specific settings outside the config (attack strategy, ...).
    pub extra: Value,
    pub outputs: Vec<String>,
    pub csv_schema_version: u32,
    pub csv_columns: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: u64, seeds: Vec<u64>) -> RunManifest {
        RunManifest {
            tool: "entropy".into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config,
            seed,
            seeds,
            systems: Vec::new(),
            sweep: None,
            extra: Value::Null,
            outputs: Vec::new(),
            csv_schema_version: entropy_core::sim::CSV_SCHEMA_VERSION,
            csv_columns: Vec::new(),
        }
    }
}

/// Writes `rows` as `<dir>/<name>.csv` and the manifest next to it; returns
/// both paths.
pub fn write_outputs<R: Serialize>(
    dir: &Path,
    name: &str,
    columns: &[&str],
    rows: &[R],
    mut manifest: RunManifest,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    let manifest_path = dir.join(format!("{name}.manifest.json"));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path)?;
    w.write_record(columns)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    manifest.csv_columns = columns.iter().map(|c| c.to_string()).collect();
    manifest.outputs = vec![csv_path.display().to_string(), manifest_path.display().to_string()];
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&manifest_path, text)?;
    Ok((csv_path, manifest_path))
}
