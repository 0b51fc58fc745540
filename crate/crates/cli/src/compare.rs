//! Side-by-side comparison of finished run directories.
//!
//! Reads nothing but each directory's `summary.json` (aggregate or single
//! run), so a report can be rebuilt from summaries alone.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use wus_core::metrics::reduction_percent;

use crate::error::CliError;
use crate::runner::AggregateSummary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub dir: PathBuf,
    pub variant: String,
    pub runs: usize,
    pub train_seconds: f64,
    pub time_reduction_percent: f64,
    pub backward_seconds: f64,
    pub backward_reduction_percent: f64,
    pub final_val_accuracy: f64,
    pub accuracy_delta: f64,
    pub parameter_updates: f64,
    pub update_reduction_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

/// The first directory is the baseline every other row is measured against.
pub fn compare(dirs: &[PathBuf]) -> Result<CompareReport, CliError> {
    if dirs.len() < 2 {
        return Err(CliError::Config("compare needs a baseline and at least one other run".into()));
    }
    let summaries = dirs.iter().map(|d| AggregateSummary::read(d)).collect::<Result<Vec<_>, _>>()?;
    let base_summary = &summaries[0];
    for (dir, s) in dirs.iter().zip(&summaries).skip(1) {
        if s.total_weights != base_summary.total_weights || s.total_biases != base_summary.total_biases {
            return Err(CliError::Config(format!(
                "{} trains a different model than the baseline",
                dir.display()
            )));
        }
        if s.epochs != base_summary.epochs {
            return Err(CliError::Config(format!(
                "{} ran {} epochs, the baseline {}",
                dir.display(),
                s.epochs,
                base_summary.epochs
            )));
        }
    }
    let base = base_summary;
    if base.mean_total_wall_seconds <= 0.0 || base.mean_parameter_updates <= 0.0 {
        return Err(CliError::Config("baseline recorded no training time or updates".into()));
    }
    let mut rows = Vec::new();
    for (dir, s) in dirs.iter().zip(&summaries) {
        rows.push(CompareRow {
            dir: dir.clone(),
            variant: s.variant.clone(),
            runs: s.repeats,
            train_seconds: s.mean_total_wall_seconds,
            time_reduction_percent: reduction_percent(base.mean_total_wall_seconds, s.mean_total_wall_seconds)?,
            backward_seconds: s.mean_backward_wall_seconds,
            backward_reduction_percent: if base.mean_backward_wall_seconds > 0.0 {
                reduction_percent(base.mean_backward_wall_seconds, s.mean_backward_wall_seconds)?
            } else {
                0.0
            },
            final_val_accuracy: s.mean_final_val_accuracy,
            accuracy_delta: s.mean_final_val_accuracy - base.mean_final_val_accuracy,
            parameter_updates: s.mean_parameter_updates,
            update_reduction_percent: reduction_percent(base.mean_parameter_updates, s.mean_parameter_updates)?,
        });
    }
    Ok(CompareReport { rows })
}

impl CompareReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>9} {:>10} {:>7} {:>10} {:>8} {:>8} {:>10}\n",
            "run", "variant", "time s", "time %", "backward %", "val acc", "Δ acc", "updates %"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>9} {:>10.2} {:>7.2} {:>10.2} {:>8.2} {:>+8.2} {:>10.2}\n",
                r.dir.display(),
                r.variant,
                r.train_seconds,
                r.time_reduction_percent,
                r.backward_reduction_percent,
                r.final_val_accuracy,
                r.accuracy_delta,
                r.update_reduction_percent
            ));
        }
        out
    }
}
