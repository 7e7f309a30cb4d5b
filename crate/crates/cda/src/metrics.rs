//! Per-step loss CSV.
//!
//! The first line is a `#` schema comment naming the format version, the
//! variant and which loss columns are inactive (always written as 0). The
//! second line is the column header.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cda_core::pipeline::{LossReport, Variant};

use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const HEADER: &str = "step,loss_total,loss_cont_s,loss_cont_t,loss_mmd,removed_per_anchor,seconds";

pub fn schema_line(variant: Variant) -> String {
    let mut inactive = Vec::new();
    if !variant.uses_target() {
        inactive.push("loss_cont_t");
    }
    if !variant.uses_mmd() {
        inactive.push("loss_mmd");
    }
    let inactive = if inactive.is_empty() {
        "none".to_string()
    } else {
        inactive.join("|")
    };
    format!("# cda-metrics v{SCHEMA_VERSION} variant={variant} inactive={inactive}")
}

/// `f64` Display is the shortest string that parses back to the same value.
pub fn format_row(r: &LossReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.step, r.total, r.cont_s, r.cont_t, r.mmd, r.removed_per_anchor, r.seconds
    )
}

pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    rows: usize,
}

impl MetricsWriter {
    /// Truncates `path` and writes the schema and header lines.
    pub fn create(path: &Path, variant: Variant) -> Result<Self> {
        let file = File::create(path).map_err(Error::io(path))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            rows: 0,
        };
        w.line(&schema_line(variant))?;
        w.line(HEADER)?;
        Ok(w)
    }

    pub fn write(&mut self, report: &LossReport) -> Result<()> {
        self.line(&format_row(report))?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(Error::io(&self.path))
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(Error::io(&self.path))
    }
}

/// Parses the data rows of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let bad = |line: usize| Error::Data(format!("{}: malformed metrics line {line}", path.display()));
    let mut lines = text.lines().enumerate();
    match (lines.next(), lines.next()) {
        (Some((_, schema)), Some((_, header))) if schema.starts_with("# cda-metrics v") && header == HEADER => {}
        _ => return Err(bad(1)),
    }
    lines
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(i + 1));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad(i + 1));
            Ok(LossReport {
                step: f[0].parse().map_err(|_| bad(i + 1))?,
                epoch: 0,
                total: num(1)?,
                cont_s: num(2)?,
                cont_t: num(3)?,
                mmd: num(4)?,
                removed_per_anchor: num(5)?,
                seconds: num(6)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schema_names_inactive_columns() {
        assert_eq!(
            schema_line(Variant::SimclrBase),
            "# cda-metrics v1 variant=simclr_base inactive=loss_cont_t|loss_mmd"
        );
        assert_eq!(
            schema_line(Variant::CdaFnrMmd),
            "# cda-metrics v1 variant=cda_fnr_mmd inactive=none"
        );
    }

    proptest! {
        #[test]
        fn rows_round_trip_exactly(step in 0u64..1_000_000, vals in proptest::array::uniform5(-1e6f64..1e6)) {
            let r = LossReport {
                step,
                total: vals[0], cont_s: vals[1], cont_t: vals[2], mmd: vals[3], seconds: vals[4].abs(),
                removed_per_anchor: 3.0,
                epoch: 0,
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.csv");
            let mut w = MetricsWriter::create(&path, Variant::CdaFnr).unwrap();
            w.write(&r).unwrap();
            w.finish().unwrap();
            prop_assert_eq!(read_metrics(&path).unwrap(), vec![r]);
        }
    }
}
