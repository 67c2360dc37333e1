//! Cross-run comparison: tabulates final accuracies and communication
//! volume of several output directories, with savings measured against the
//! first directory given.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::runner::{METRICS_HEADER, SCHEMA_VERSION};

/// The slice of `summary.json` that comparison needs.
#[derive(Debug, Deserialize)]
struct SummaryFile {
    schema_version: u32,
    config: EchoConfig,
    final_accuracy_global: f64,
    final_accuracy_local: f64,
    cumulative_bytes: u64,
}

#[derive(Debug, Deserialize)]
struct EchoConfig {
    method: String,
    setting: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub dir: PathBuf,
    pub method: String,
    pub setting: String,
    pub final_accuracy_global: f64,
    pub final_accuracy_local: f64,
    pub cumulative_bytes: u64,
    /// `1 - bytes / baseline_bytes`; `None` when the baseline moved nothing.
    pub savings_vs_baseline: Option<f64>,
}

/// Comparison table; the first run is the savings baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
}

fn load_summary(dir: &Path) -> Result<SummaryFile> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let summary: SummaryFile = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{} is not a run summary: {e}", path.display())))?;
    if summary.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "{} has schema version {}, this tool expects {}",
            path.display(),
            summary.schema_version,
            SCHEMA_VERSION
        )));
    }
    let metrics = dir.join("metrics.csv");
    let metrics_text = std::fs::read_to_string(&metrics)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", metrics.display())))?;
    let header = metrics_text.lines().next().unwrap_or("");
    if header != METRICS_HEADER {
        return Err(Error::Schema(format!(
            "{} has columns `{header}`, this tool expects `{METRICS_HEADER}`",
            metrics.display()
        )));
    }
    Ok(summary)
}

/// Loads each run directory and computes savings relative to the first.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.is_empty() {
        return Err(Error::Config("compare needs at least one run directory".into()));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    let mut baseline_bytes = None;
    for dir in dirs {
        let summary = load_summary(dir)?;
        let baseline = *baseline_bytes.get_or_insert(summary.cumulative_bytes);
        let savings = if baseline > 0 {
            Some(1.0 - summary.cumulative_bytes as f64 / baseline as f64)
        } else {
            None
        };
        rows.push(CompareRow {
            dir: dir.clone(),
            method: summary.config.method,
            setting: summary.config.setting,
            final_accuracy_global: summary.final_accuracy_global,
            final_accuracy_local: summary.final_accuracy_local,
            cumulative_bytes: summary.cumulative_bytes,
            savings_vs_baseline: savings,
        });
    }
    Ok(Comparison { rows })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut cells: Vec<[String; 7]> = vec![[
            "run".into(),
            "method".into(),
            "setting".into(),
            "acc_global".into(),
            "acc_local".into(),
            "bytes".into(),
            "savings".into(),
        ]];
        for (i, row) in self.rows.iter().enumerate() {
            let name = if i == 0 {
                format!("{} (baseline)", row.dir.display())
            } else {
                row.dir.display().to_string()
            };
            cells.push([
                name,
                row.method.clone(),
                row.setting.clone(),
                format!("{:.4}", row.final_accuracy_global),
                format!("{:.4}", row.final_accuracy_local),
                row.cumulative_bytes.to_string(),
                match row.savings_vs_baseline {
                    Some(s) => format!("{:.1}%", s * 100.0),
                    None => "-".into(),
                },
            ]);
        }
        let mut widths = [0usize; 7];
        for row in &cells {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        for row in &cells {
            let mut line = String::new();
            for (i, (cell, width)) in row.iter().zip(&widths).enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                line.push_str(&format!("{cell:<width$}"));
            }
            writeln!(f, "{}", line.trim_end())?;
        }
        Ok(())
    }
}
