use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const RESULTS_HEADER: &str = "planner,maxT,depT,packages,seed,sr,ap,mr,step_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub planner: String,
    pub max_t: u32,
    /// Departure slot of the day.
    pub dep_t: u32,
    pub packages: usize,
    pub seed: u64,
    pub sr: f64,
    pub ap: f64,
    pub mr: f64,
    /// Wall-clock figures vary between runs, so they are optional.
    pub step_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
}

/// Four decimals; NaN becomes an empty field.
pub fn format_rate(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.4}")
    }
}

pub fn write_results(mut w: impl Write, table: &ResultsTable) -> Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in &table.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.planner,
            r.max_t,
            r.dep_t,
            r.packages,
            r.seed,
            format_rate(r.sr),
            format_rate(r.ap),
            format_rate(r.mr),
            r.step_ms.map(format_rate).unwrap_or_default(),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_results(table: &ResultsTable, path: impl AsRef<Path>) -> Result<()> {
    write_results(BufWriter::new(File::create(path)?), table)
}
