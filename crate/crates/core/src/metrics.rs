//! Update ledger, per-epoch records, parameter histograms and the run
//! directory writer.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerEvent, Phase};
use crate::error::{Error, Result};
use crate::network::{Gradients, Network, ParamClass};
use crate::optim::UpdateCounts;
use crate::scalar::Scalar;

/// `E_wus·b_active + E_normal·(b_total + w)`: elements written when WUS epochs
/// touch only the gated biases.
pub fn predicted_updates(e_wus: u64, e_normal: u64, w: u64, b_active: u64, b_total: u64) -> u64 {
    e_wus * b_active + e_normal * (b_total + w)
}

/// The same count with every bias charged during WUS epochs.
pub fn predicted_updates_literal(e_wus: u64, e_normal: u64, w: u64, b_total: u64) -> u64 {
    predicted_updates(e_wus, e_normal, w, b_total, b_total)
}

/// `100·(baseline − variant)/baseline`
pub fn reduction_percent(baseline: f64, variant: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Contract(format!(
            "reduction needs a positive baseline, got {baseline}"
        )));
    }
    Ok(100.0 * (baseline - variant) / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub epoch: usize,
    pub phase: Phase,
    /// Distinct weight elements written during the epoch.
    pub weights_updated: u64,
    /// Distinct bias elements written during the epoch.
    pub biases_updated: u64,
    /// Optimizer steps taken.
    pub steps: u64,
    /// Element writes summed over every step.
    pub writes: UpdateCounts,
}

/// Collects the per-step counts of one epoch.
#[derive(Debug, Clone, Default)]
pub struct EpochUpdates {
    per_step: Option<UpdateCounts>,
    steps: u64,
    writes: UpdateCounts,
}

impl EpochUpdates {
    /// Every step of an epoch runs under the same plan, so each step touches
    /// the same elements; a differing count means the plan changed mid-epoch.
    pub fn observe(&mut self, counts: UpdateCounts) -> Result<()> {
        match self.per_step {
            Some(prev) if prev != counts => {
                return Err(Error::Contract(format!(
                    "step wrote {counts:?} after {prev:?} within one epoch"
                )))
            }
            _ => self.per_step = Some(counts),
        }
        self.steps += 1;
        self.writes += counts;
        Ok(())
    }

    pub fn distinct(&self) -> UpdateCounts {
        self.per_step.unwrap_or_default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn writes(&self) -> UpdateCounts {
        self.writes
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UpdateLedger {
    rows: Vec<LedgerRow>,
}

impl UpdateLedger {
    pub fn record(&mut self, epoch: usize, phase: Phase, updates: &EpochUpdates) -> Result<()> {
        let expected = self.rows.len();
        if epoch != expected {
            return Err(Error::Contract(format!(
                "ledger expected epoch {expected}, got {epoch}"
            )));
        }
        let distinct = updates.distinct();
        self.rows.push(LedgerRow {
            epoch,
            phase,
            weights_updated: distinct.weights,
            biases_updated: distinct.biases,
            steps: updates.steps(),
            writes: updates.writes(),
        });
        Ok(())
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn totals(&self) -> UpdateCounts {
        self.rows.iter().fold(UpdateCounts::default(), |acc, r| {
            acc + UpdateCounts {
                weights: r.weights_updated,
                biases: r.biases_updated,
            }
        })
    }

    pub fn total_writes(&self) -> UpdateCounts {
        self.rows.iter().fold(UpdateCounts::default(), |acc, r| acc + r.writes)
    }

    pub fn wus_epochs(&self) -> u64 {
        self.rows.iter().filter(|r| r.phase.skips_weights()).count() as u64
    }

    pub fn normal_epochs(&self) -> u64 {
        self.rows.len() as u64 - self.wus_epochs()
    }
}

/// One row of `epochs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    #[serde(rename = "train_acc")]
    pub train_accuracy: f64,
    #[serde(rename = "val_acc")]
    pub val_accuracy: f64,
    pub lr: f64,
    #[serde(rename = "epoch_s")]
    pub epoch_wall_seconds: f64,
    #[serde(rename = "backward_s")]
    pub backward_wall_seconds: f64,
    pub backward_flops: u64,
    pub weights_updated: u64,
    pub biases_updated: u64,
}

pub const EPOCHS_CSV_HEADER: &str =
    "epoch,phase,train_loss,train_acc,val_acc,lr,epoch_s,backward_s,backward_flops,weights_updated,biases_updated";

pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; the maximum lands in the last bin
    /// and a constant input fills the first.
    pub fn from_values(values: impl Iterator<Item = f64> + Clone, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Contract(format!("histogram needs at least 2 bins, got {bins}")));
        }
        let (mut min, mut max, mut n, mut sum, mut sum_abs) = (f64::INFINITY, f64::NEG_INFINITY, 0usize, 0.0, 0.0);
        for v in values.clone() {
            min = min.min(v);
            max = max.max(v);
            n += 1;
            sum += v;
            sum_abs += v.abs();
        }
        if n == 0 {
            return Err(Error::Contract("histogram of an empty tensor".into()));
        }
        let mean = sum / n as f64;
        let var = values.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let mut counts = vec![0u64; bins];
        let width = (max - min) / bins as f64;
        for v in values {
            let idx = if width > 0.0 {
                (((v - min) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[idx] += 1;
        }
        Ok(Histogram {
            min,
            max,
            counts,
            mean,
            std: var.sqrt(),
            mean_abs: sum_abs / n as f64,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHistogram {
    pub layer: usize,
    pub class: ParamClass,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSet {
    pub epoch: usize,
    pub parameters: Vec<TensorHistogram>,
    pub gradients: Vec<TensorHistogram>,
}

impl HistogramSet {
    /// Mean |g| over every weight-class gradient element.
    pub fn mean_abs_weight_gradient(&self) -> Option<f64> {
        mean_abs_of(&self.gradients, ParamClass::Weights)
    }

    pub fn mean_abs_weight(&self) -> Option<f64> {
        mean_abs_of(&self.parameters, ParamClass::Weights)
    }
}

fn mean_abs_of(hists: &[TensorHistogram], class: ParamClass) -> Option<f64> {
    let (sum, n) = hists
        .iter()
        .filter(|h| h.class == class)
        .fold((0.0, 0u64), |(s, n), h| {
            let c = h.histogram.total();
            (s + h.histogram.mean_abs * c as f64, n + c)
        });
    (n > 0).then(|| sum / n as f64)
}

/// Histograms of every parameter tensor and, when given, every gradient tensor.
pub fn snapshot_histogram<T: Scalar>(
    net: &Network<T>,
    grads: Option<&Gradients<T>>,
    epoch: usize,
    bins: usize,
) -> Result<HistogramSet> {
    let hist = |layer, class, data: &[T]| -> Result<TensorHistogram> {
        Ok(TensorHistogram {
            layer,
            class,
            histogram: Histogram::from_values(data.iter().map(|v| v.to_f64_lossy()), bins)?,
        })
    };
    let parameters = net
        .params()
        .map(|(l, c, t)| hist(l, c, t.data()))
        .collect::<Result<Vec<_>>>()?;
    let gradients = match grads {
        Some(g) => g.entries().map(|(l, c, t)| hist(l, c, t.data())).collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok(HistogramSet {
        epoch,
        parameters,
        gradients,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub precision: String,
    pub epochs: usize,
    pub depth_k: usize,
    pub initial_epoch: Option<usize>,
    pub wus_epochs: u64,
    pub normal_epochs: u64,
    pub total_weights: u64,
    pub total_biases: u64,
    pub active_biases: u64,
    pub weights_updated: u64,
    pub biases_updated: u64,
    pub predicted_updates: u64,
    pub predicted_updates_literal: u64,
    /// Updates an all-normal run of the same length would perform.
    pub baseline_updates: u64,
    pub update_reduction_percent: f64,
    pub total_wall_seconds: f64,
    pub backward_wall_seconds: f64,
    pub backward_flops: u64,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: f64,
    pub final_train_loss: f64,
}

impl RunSummary {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes one run directory: `epochs.csv`, `events.jsonl`,
/// `histograms/epoch_<n>.json` and `summary.json`. Rows are flushed as they
/// arrive so a crashed run still leaves a readable prefix.
pub struct RunWriter {
    dir: PathBuf,
    epochs: csv::Writer<File>,
    events: BufWriter<File>,
}

impl RunWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("histograms"))?;
        Ok(RunWriter {
            epochs: csv::Writer::from_path(dir.join("epochs.csv"))?,
            events: BufWriter::new(File::create(dir.join("events.jsonl"))?),
            dir,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn epoch(&mut self, record: &EpochRecord) -> Result<()> {
        self.epochs.serialize(record)?;
        self.epochs.flush()?;
        Ok(())
    }

    pub fn event(&mut self, event: &ControllerEvent) -> Result<()> {
        serde_json::to_writer(&mut self.events, event)?;
        self.events.write_all(b"\n")?;
        self.events.flush()?;
        Ok(())
    }

    pub fn histograms(&mut self, set: &HistogramSet) -> Result<()> {
        let path = self.dir.join("histograms").join(format!("epoch_{}.json", set.epoch));
        fs::write(path, serde_json::to_vec_pretty(set)?)?;
        Ok(())
    }

    pub fn summary(&mut self, summary: &RunSummary) -> Result<()> {
        fs::write(self.dir.join("summary.json"), serde_json::to_vec_pretty(summary)?)?;
        Ok(())
    }
}
