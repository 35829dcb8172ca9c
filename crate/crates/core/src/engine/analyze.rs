//! Correlation summaries over the scatter exports of a run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::drift::{correlation, CorrelationMethod, ScatterRow};
use crate::error::{Error, Result};
use crate::eval::csv_err;

use super::run::RunLayout;

/// Variable pairs reported by [`analyze`].
pub const PAIRS: [(&str, &str); 4] = [("n", "q"), ("s", "h"), ("n", "h"), ("q", "h")];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    /// `all` or `period_<t>`.
    pub scope: String,
    pub pair: String,
    pub method: &'static str,
    /// `None` when one side is constant or there are fewer than two points.
    pub value: Option<f64>,
    pub count: usize,
}

fn column(rows: &[ScatterRow<f64>], name: &str) -> Vec<f64> {
    rows.iter()
        .map(|r| match name {
            "q" => r.q,
            "n" => r.n,
            "s" => r.s,
            _ => r.h,
        })
        .collect()
}

pub fn read_scatter_csv(path: &Path) -> Result<Vec<ScatterRow<f64>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    }
    Ok(rows)
}

/// Loads `scatter/<user>/period_<t>.csv` files, keyed by period.
pub fn load_scatter(run_dir: impl AsRef<Path>) -> Result<BTreeMap<usize, Vec<ScatterRow<f64>>>> {
    let dir = RunLayout::new(run_dir.as_ref()).scatter_dir();
    let mut by_period: BTreeMap<usize, Vec<ScatterRow<f64>>> = BTreeMap::new();
    let users = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    for user in users {
        let user = user?.path();
        if !user.is_dir() {
            continue;
        }
        for f in std::fs::read_dir(&user).map_err(|e| Error::io(&user, e))? {
            files.push(f?.path());
        }
    }
    // directory iteration order is platform dependent
    files.sort();
    for f in files {
        let period = f
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("period_"))
            .and_then(|s| s.parse().ok());
        if let Some(t) = period {
            by_period.entry(t).or_default().extend(read_scatter_csv(&f)?);
        }
    }
    Ok(by_period)
}

pub fn correlations(scope: &str, rows: &[ScatterRow<f64>]) -> Vec<CorrelationRow> {
    let mut out = Vec::new();
    for (a, b) in PAIRS {
        let (xs, ys) = (column(rows, a), column(rows, b));
        for (method, m) in [("pearson", CorrelationMethod::Pearson), ("spearman", CorrelationMethod::Spearman)] {
            out.push(CorrelationRow {
                scope: scope.to_string(),
                pair: format!("{a}~{b}"),
                method,
                value: correlation(&xs, &ys, m).ok(),
                count: rows.len(),
            });
        }
    }
    out
}

/// Correlations per period and pooled, written to `analysis.csv` in the
/// run directory.
pub fn analyze(run_dir: impl AsRef<Path>) -> Result<Vec<CorrelationRow>> {
    let run_dir = run_dir.as_ref();
    let by_period = load_scatter(run_dir)?;
    if by_period.is_empty() {
        return Err(Error::Data(format!("no scatter exports under {}", run_dir.display())));
    }
    let all: Vec<ScatterRow<f64>> = by_period.values().flatten().copied().collect();
    let mut rows = correlations("all", &all);
    for (t, r) in &by_period {
        rows.extend(correlations(&format!("period_{t}"), r));
    }
    let path = run_dir.join("analysis.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["scope", "pair", "method", "value", "count"]).map_err(csv_err)?;
    for r in &rows {
        let value = r.value.map(|v| format!("{v:.6}")).unwrap_or_default();
        w.write_record([r.scope.as_str(), &r.pair, r.method, &value, &r.count.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}
