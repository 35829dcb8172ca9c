//! Ablation grids: one full run per setting of a single axis.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::buffer::RetentionPolicy;
use crate::corpus::UserStream;
use crate::drift::SelectionMode;
use crate::error::{Error, Result};
use crate::eval::{csv_err, Report};
use crate::lm::LanguageModel;
use crate::scalar::Real;

use super::config::RunConfig;
use super::run::{run_stream, sanitize_id};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    SelectionMode,
    RetentionPolicy,
    Gating,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "lambda" => Ok(SweepAxis::Lambda),
            "selection_mode" => Ok(SweepAxis::SelectionMode),
            "retention_policy" => Ok(SweepAxis::RetentionPolicy),
            "gating" => Ok(SweepAxis::Gating),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::SelectionMode => "selection_mode",
            SweepAxis::RetentionPolicy => "retention_policy",
            SweepAxis::Gating => "gating",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Lambda => &["0", "0.1", "0.3", "0.5", "0.7", "1.0"],
            SweepAxis::SelectionMode => &["top", "bottom", "random", "all"],
            SweepAxis::RetentionPolicy => &["global_highest", "cluster_wise", "cluster_round", "random"],
            SweepAxis::Gating => &["on", "off"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let parse_enum = |v: &str| serde_json::Value::String(v.replace('-', "_"));
        let bad = |e: serde_json::Error| Error::Config(format!("{} = {value:?}: {e}", self.name()));
        match self {
            SweepAxis::Lambda => {
                cfg.lambda = value
                    .parse()
                    .map_err(|_| Error::Config(format!("lambda value {value:?} is not a number")))?
            }
            SweepAxis::SelectionMode => {
                cfg.selection_mode = serde_json::from_value::<SelectionMode>(parse_enum(value)).map_err(bad)?;
                if cfg.selection_mode == SelectionMode::All {
                    cfg.top_percent = 100.0;
                }
            }
            SweepAxis::RetentionPolicy => {
                cfg.retention_policy = serde_json::from_value::<RetentionPolicy>(parse_enum(value)).map_err(bad)?
            }
            SweepAxis::Gating => {
                cfg.gating = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(Error::Config(format!("gating value {value:?} must be on or off"))),
                }
            }
        }
        cfg.stop_after_period = None;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult<T> {
    pub value: String,
    pub report: Report<T>,
}

/// One run per value in `out_dir/<axis>_<value>/`, plus `sweep.csv`
/// summarizing every variant's per-period and average scores.
pub fn sweep<T, M>(
    model: &M,
    streams: &[UserStream],
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SweepResult<T>>>
where
    T: Real,
    M: LanguageModel<T>,
{
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut results = Vec::new();
    for value in values {
        let cfg = axis.apply(base, value)?;
        let dir = out_dir.join(format!("{}_{}", axis.name(), sanitize_id(value)));
        log::info!("sweep {} = {value}", axis.name());
        let outcome = run_stream(model, streams, &cfg, &dir)?;
        results.push(SweepResult {
            value: value.clone(),
            report: outcome.report,
        });
    }
    write_summary(&out_dir.join("sweep.csv"), axis, &results)?;
    Ok(results)
}

fn write_summary<T: Real>(path: &Path, axis: SweepAxis, results: &[SweepResult<T>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([axis.name(), "period", "r1_f1", "rl_f1"]).map_err(csv_err)?;
    let fmt = |x: T| format!("{:.4}", x.as_f64());
    for r in results {
        for (p, s) in &r.report.per_period {
            w.write_record([r.value.as_str(), &p.to_string(), &fmt(s.r1_f1), &fmt(s.rl_f1)])
                .map_err(csv_err)?;
        }
        if let Some(s) = &r.report.period_avg {
            w.write_record([r.value.as_str(), "period_avg", &fmt(s.r1_f1), &fmt(s.rl_f1)])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
