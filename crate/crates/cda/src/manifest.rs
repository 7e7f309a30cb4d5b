//! Run manifests: one row per `(pair, variant, seed)` result.

use std::fs;
use std::path::Path;

use cda_core::pipeline::{LossReport, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{Error, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex SHA-256 of the config's canonical JSON (object keys sorted), so the
/// hash ignores key order and formatting in the source file.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let value = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let canonical = serde_json::to_string(&value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub pair: String,
    pub variant: Variant,
    pub seed: u64,
    pub source_accuracy: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub final_losses: Option<LossReport>,
    pub pretrain_seconds: f64,
    /// Set when the cell failed; the other result fields are then empty.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub rows: Vec<ManifestRow>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            config_hash: config_hash(cfg)?,
            code_version: CODE_VERSION.to_string(),
            rows: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Loads `path` if it exists and was written for the same config,
    /// otherwise starts an empty manifest.
    pub fn open(path: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let fresh = Self::new(cfg)?;
        if !path.exists() {
            return Ok(fresh);
        }
        let existing = Self::load(path)?;
        if existing.config_hash != fresh.config_hash {
            return Err(Error::Config(format!(
                "{} was written for config {}, not {}",
                path.display(),
                existing.config_hash,
                fresh.config_hash
            )));
        }
        Ok(existing)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    /// Adds `row`, replacing an earlier row for the same cell.
    pub fn upsert(&mut self, row: ManifestRow) {
        let same = |r: &ManifestRow| r.pair == row.pair && r.variant == row.variant && r.seed == row.seed;
        match self.rows.iter_mut().find(|r| same(r)) {
            Some(r) => *r = row,
            None => self.rows.push(row),
        }
    }

    /// Markdown table: one row per variant, one column per pair (median target
    /// accuracy over seeds, in percent) and the mean of those columns.
    pub fn summary_table(&self) -> String {
        let mut pairs: Vec<&str> = Vec::new();
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !pairs.contains(&r.pair.as_str()) {
                pairs.push(&r.pair);
            }
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        let mut out = format!("| variant | {} | Avg |\n", pairs.join(" | "));
        out += &format!("|---|{}---|\n", "---|".repeat(pairs.len()));
        for v in variants {
            let cells: Vec<Option<f64>> = pairs
                .iter()
                .map(|p| {
                    median(
                        self.rows
                            .iter()
                            .filter(|r| r.variant == v && r.pair == *p)
                            .filter_map(|r| r.target_accuracy)
                            .collect(),
                    )
                })
                .collect();
            let avg = row_average(&cells);
            let fmt = |c: Option<f64>| c.map_or("n/a".to_string(), |x| format!("{:.1}", 100.0 * x));
            let body: Vec<String> = cells.iter().map(|&c| fmt(c)).collect();
            out += &format!("| {v} | {} | {} |\n", body.join(" | "), fmt(avg));
        }
        out
    }
}

/// Median with the upper middle element for even counts.
pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    Some(xs[xs.len() / 2])
}

/// Mean of the cells, or `None` when any cell is missing.
pub fn row_average(cells: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = cells.iter().copied().collect();
    vals.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}
