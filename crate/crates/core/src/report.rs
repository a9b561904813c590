//! Experiment results and their on-disk form: CSV table, JSON sidecar, text summary.

use crate::error::{LabError, Result};
use crate::stats::ExponentFit;
use serde::Serialize;
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Version of the CSV column layout, written as the first column of every row.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Num(v) if v.is_nan() => "NaN".into(),
            Cell::Num(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    /// Samples per cell (0 for deterministic reports).
    pub samples: usize,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub fits: BTreeMap<String, ExponentFit>,
    pub diagnostics: BTreeMap<String, Value>,
    pub warnings: Vec<String>,
}

impl ExperimentResult {
    pub fn new(experiment: &str, columns: &[&str]) -> Self {
        ExperimentResult {
            experiment: experiment.to_string(),
            config_hash: String::new(),
            seed: 0,
            samples: 0,
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            fits: BTreeMap::new(),
            diagnostics: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn diag(&mut self, key: &str, value: impl Serialize) {
        self.diagnostics.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(
            self.rows
                .iter()
                .map(|r| match &r[k] {
                    Cell::Num(v) => *v,
                    Cell::Int(v) => *v as f64,
                    Cell::Text(_) => f64::NAN,
                })
                .collect(),
        )
    }

    /// RFC 4180 text with a leading `schema_version` column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        let mut header = vec!["schema_version".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(|e| LabError::Numerical(e.to_string()))?;
        for row in &self.rows {
            let mut rec = vec![SCHEMA_VERSION.to_string()];
            rec.extend(row.iter().map(Cell::render));
            w.write_record(&rec).map_err(|e| LabError::Numerical(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| LabError::Numerical(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("result serializes");
        if let Value::Object(map) = &mut v {
            map.remove("rows");
            map.insert("schema_version".into(), SCHEMA_VERSION.into());
            map.insert("rows".into(), self.rows.len().into());
        }
        // serde_json's default map is ordered by key, which keeps the layout stable
        let mut s = serde_json::to_string_pretty(&v).expect("json");
        s.push('\n');
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} (config {}, seed {})", self.experiment, self.config_hash, self.seed);
        if self.samples > 0 {
            let _ = writeln!(s, "samples per cell: {}", self.samples);
        }
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(k, c)| self.rows.iter().map(|r| short(&r[k]).len()).chain([c.len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: Vec<String>| -> String {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
        };
        let _ = writeln!(s, "{}", line(self.columns.clone()));
        for r in &self.rows {
            let _ = writeln!(s, "{}", line(r.iter().map(short).collect()));
        }
        for (k, f) in &self.fits {
            let _ = writeln!(
                s,
                "fit {k}: slope {:.4} ± {:.4} (95% CI [{:.4}, {:.4}])",
                f.slope, f.slope_se, f.slope_ci.0, f.slope_ci.1
            );
        }
        for (k, v) in &self.diagnostics {
            let _ = writeln!(s, "{k}: {v}");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    /// Writes `<experiment>.csv`, `<experiment>.json` and `<experiment>.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let mut out = Vec::new();
        for (ext, body) in [("csv", self.to_csv()?), ("json", self.to_json()), ("txt", self.summary())] {
            let p = dir.join(format!("{}.{ext}", self.experiment));
            std::fs::write(&p, body).map_err(|e| LabError::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }
}

fn short(c: &Cell) -> String {
    match c {
        Cell::Num(v) if v.is_finite() && *v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e6) => format!("{v:.4e}"),
        Cell::Num(v) if v.is_finite() => format!("{v:.6}"),
        other => other.render(),
    }
}
