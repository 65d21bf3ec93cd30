//! Merges per-run `summary.json` files into one long-format table.
//!
//! The table has no metadata line, so re-running over the same directory
//! reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::experiments::{RunSummary, SUMMARY_FILE};
use crate::output::{render_csv, Cell};

pub const TABLE_COLUMNS: [&str; 6] = [
    "experiment",
    "scheme",
    "lambda0",
    "metric",
    "value",
    "source",
];

#[derive(Debug, Default)]
pub struct Outcome {
    pub table: String,
    pub runs: usize,
    pub rows: usize,
    /// Unreadable summaries with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    /// Keys seen in more than one run; the first run in path order wins.
    pub duplicates: Vec<String>,
}

/// Finds every `summary.json` below `dir`, in sorted path order.
fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        let hidden = path
            .file_name()
            .is_some_and(|n| n.to_string_lossy().starts_with('.'));
        if hidden {
            continue;
        }
        if path.is_dir() {
            find_summaries(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

type Key = (String, String, u64, String);

pub fn summarize(dir: &Path) -> Result<Outcome> {
    let mut paths = Vec::new();
    find_summaries(dir, &mut paths)?;
    let mut outcome = Outcome::default();
    let mut table: BTreeMap<Key, (f64, f64, String)> = BTreeMap::new();
    for path in paths {
        let source = path
            .parent()
            .and_then(|p| p.strip_prefix(dir).ok())
            .map(|p| p.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".to_string());
        let parsed = fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|text| serde_json::from_str::<RunSummary>(&text).map_err(|e| e.to_string()));
        let summary = match parsed {
            Ok(s) => s,
            Err(e) => {
                outcome.skipped.push((path, e));
                continue;
            }
        };
        outcome.runs += 1;
        for row in &summary.rows {
            for (metric, value) in &row.metrics {
                // Lambda sorts numerically; non-negative floats order like their bits.
                let key = (
                    summary.experiment.clone(),
                    row.scheme.as_str().to_string(),
                    row.lambda0.to_bits(),
                    metric.clone(),
                );
                if table.contains_key(&key) {
                    outcome.duplicates.push(format!(
                        "{} {} lambda0={} {} (from {source})",
                        key.0, key.1, row.lambda0, key.3
                    ));
                    continue;
                }
                table.insert(key, (row.lambda0, *value, source.clone()));
            }
        }
    }
    let rows: Vec<Vec<Cell>> = table
        .into_iter()
        .map(|((exp, scheme, _, metric), (lambda0, value, source))| {
            vec![
                Cell::from(exp),
                Cell::from(scheme),
                Cell::from(lambda0),
                Cell::from(metric),
                Cell::from(value),
                Cell::from(source),
            ]
        })
        .collect();
    outcome.rows = rows.len();
    outcome.table = render_csv(&TABLE_COLUMNS, &rows);
    Ok(outcome)
}
