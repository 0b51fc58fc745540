//! Epoch loop tying the network, optimizer, controller and ledger together.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controller::{gate_plan_for, Controller, ControllerConfig, ControllerEvent, Phase};
use crate::data::{batches, eval_batches, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{
    predicted_updates, predicted_updates_literal, reduction_percent, snapshot_histogram, EpochRecord,
    EpochUpdates, HistogramSet, RunSummary, RunWriter, UpdateLedger,
};
use crate::network::{softmax_cross_entropy, GatePlan, Network};
use crate::optim::{Sgd, SgdConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub controller: ControllerConfig,
    /// Forced phase per epoch; bypasses the controller's decisions.
    pub schedule: Option<Vec<Phase>>,
    /// Seeds minibatch shuffling.
    pub seed: u64,
    /// Epochs after which parameter and gradient histograms are taken.
    pub histogram_epochs: Vec<usize>,
    pub histogram_bins: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            controller: ControllerConfig::default(),
            schedule: None,
            seed: 0,
            histogram_epochs: Vec::new(),
            histogram_bins: 30,
            eval_batch_size: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub events: Vec<ControllerEvent>,
    pub ledger: UpdateLedger,
    pub histograms: Vec<HistogramSet>,
    pub summary: RunSummary,
}

/// Rows of `logits` whose arg-max equals the label.
fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            best == l
        })
        .count()
}

/// Validation accuracy in percent, inference mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0;
    for batch in eval_batches::<T>(data, batch_size.max(1)) {
        let (x, labels) = batch?;
        correct += count_correct(&net.predict(&x)?, &labels);
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

pub struct Trainer<'a, T: Scalar> {
    cfg: TrainConfig,
    net: Network<T>,
    sgd: Sgd<T>,
    controller: Controller,
    layout: Vec<bool>,
    phase: Phase,
    train: &'a Dataset,
    val: &'a Dataset,
    batch_plan: BatchPlan,
    probe: (Tensor<T>, Vec<usize>),
    epoch: usize,
    ledger: UpdateLedger,
    records: Vec<EpochRecord>,
    events: Vec<ControllerEvent>,
    histograms: Vec<HistogramSet>,
    writer: Option<RunWriter>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(net: Network<T>, train: &'a Dataset, val: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        let layout = net.parametric_layout();
        let controller = Controller::new(cfg.controller.clone(), &layout)?;
        let sgd = Sgd::new(cfg.sgd.clone(), &net)?;
        if let Some(s) = &cfg.schedule {
            if s.len() < cfg.sgd.epochs {
                return Err(Error::Config(format!(
                    "schedule covers {} epochs, run has {}",
                    s.len(),
                    cfg.sgd.epochs
                )));
            }
        }
        for d in [train, val] {
            if d.sample_shape() != net.input_shape() {
                return Err(Error::Config(format!(
                    "dataset samples are {:?}, network expects {:?}",
                    d.sample_shape(),
                    net.input_shape()
                )));
            }
            if d.class_count() > net.classes() {
                return Err(Error::Config(format!(
                    "dataset has {} classes, network emits {}",
                    d.class_count(),
                    net.classes()
                )));
            }
        }
        if cfg.histogram_bins < 2 {
            return Err(Error::Config("histogram_bins must be at least 2".into()));
        }
        let probe_rows: Vec<usize> = (0..cfg.sgd.batch_size.min(train.len())).collect();
        let probe = train.gather(&probe_rows)?;
        let phase = match &cfg.schedule {
            Some(s) => s[0],
            None => controller.phase(),
        };
        Ok(Trainer {
            batch_plan: BatchPlan::new(cfg.seed, cfg.sgd.batch_size)?,
            cfg,
            net,
            sgd,
            controller,
            layout,
            phase,
            train,
            val,
            probe,
            epoch: 0,
            ledger: UpdateLedger::default(),
            records: Vec::new(),
            events: Vec::new(),
            histograms: Vec::new(),
            writer: None,
        })
    }

    pub fn with_writer(mut self, writer: RunWriter) -> Self {
        self.writer = Some(writer);
        self
    }

    pub fn net(&self) -> &Network<T> {
        &self.net
    }

    pub fn sgd(&self) -> &Sgd<T> {
        &self.sgd
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Phase the next call to [`Trainer::run_epoch`] will train under.
    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn plan(&self) -> Result<GatePlan> {
        gate_plan_for(self.phase, self.cfg.controller.depth_k, &self.layout)
    }

    pub fn ledger(&self) -> &UpdateLedger {
        &self.ledger
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn events(&self) -> &[ControllerEvent] {
        &self.events
    }

    pub fn histograms(&self) -> &[HistogramSet] {
        &self.histograms
    }

    /// Full-plan gradient of the fixed probe batch, leaving the network untouched.
    pub fn probe_histograms(&self, epoch: usize) -> Result<HistogramSet> {
        let mut scratch = self.net.clone();
        let plan = scratch.normal_plan();
        let (logits, tape) = scratch.forward(&self.probe.0, true)?;
        let loss = softmax_cross_entropy(&logits, &self.probe.1)?;
        let grads = scratch.backward(&tape, &loss.grad_logits, &plan)?;
        snapshot_histogram(&self.net, Some(&grads), epoch, self.cfg.histogram_bins)
    }

    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.epoch;
        let phase = self.phase;
        let plan = self.plan()?;
        let lr = self.cfg.sgd.lr_at_epoch(epoch);
        let started = Instant::now();
        let mut backward_s = 0.0;
        let mut flops = 0u64;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut updates = EpochUpdates::default();

        for (b, batch) in batches::<T>(self.train, &self.batch_plan, epoch).enumerate() {
            let (x, labels) = batch?;
            let (logits, tape) = self.net.forward_for_plan(&x, true, &plan)?;
            let out = softmax_cross_entropy(&logits, &labels)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b });
            }
            loss_sum += out.loss * labels.len() as f64;
            correct += out.correct;

            let t0 = Instant::now();
            let grads = self.net.backward(&tape, &out.grad_logits, &plan)?;
            let counts = self.sgd.step(&mut self.net, &grads, &plan, lr)?;
            backward_s += t0.elapsed().as_secs_f64();

            flops += self.net.backward_flops(&plan, labels.len());
            updates.observe(counts)?;
        }

        let val_accuracy = evaluate(&self.net, self.val, self.cfg.eval_batch_size)?;
        let n = self.train.len() as f64;
        self.ledger.record(epoch, phase, &updates)?;

        let next = match &self.cfg.schedule {
            Some(s) => {
                let next = s.get(epoch + 1).copied().unwrap_or(phase);
                ControllerEvent {
                    epoch,
                    phase,
                    reason: "scripted".into(),
                    std: None,
                    counter: 0,
                    lr,
                    next_phase: next,
                }
            }
            None => {
                let lr_changed = self.cfg.sgd.lr_changes_after(epoch);
                self.controller
                    .on_validation_end(val_accuracy, epoch, lr_changed, lr)?
                    .event
            }
        };
        if self.cfg.histogram_epochs.contains(&epoch) {
            let set = self.probe_histograms(epoch)?;
            if let Some(w) = &mut self.writer {
                w.histograms(&set)?;
            }
            self.histograms.push(set);
        }

        let distinct = updates.distinct();
        let record = EpochRecord {
            epoch,
            phase,
            train_loss: loss_sum / n,
            train_accuracy: 100.0 * correct as f64 / n,
            val_accuracy,
            lr,
            epoch_wall_seconds: started.elapsed().as_secs_f64(),
            backward_wall_seconds: backward_s,
            backward_flops: flops,
            weights_updated: distinct.weights,
            biases_updated: distinct.biases,
        };
        if let Some(w) = &mut self.writer {
            w.epoch(&record)?;
            w.event(&next)?;
        }
        self.phase = next.next_phase;
        self.events.push(next);
        self.records.push(record);
        self.epoch += 1;
        Ok(self.records.last().unwrap())
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let w = self.net.weight_count() as u64;
        let b_total = self.net.bias_count() as u64;
        let b_active = self.net.bias_count_last_k(self.cfg.controller.depth_k) as u64;
        let (e_wus, e_normal) = (self.ledger.wus_epochs(), self.ledger.normal_epochs());
        let totals = self.ledger.totals();
        let baseline_updates = self.records.len() as u64 * (w + b_total);
        let last = self.records.last();
        let variant = match (&self.cfg.schedule, self.cfg.controller.variant) {
            (Some(_), _) => "scripted",
            (None, v) => v.name(),
        };
        Ok(RunSummary {
            variant: variant.to_string(),
            seed: self.cfg.seed,
            precision: T::PRECISION.name().to_string(),
            epochs: self.records.len(),
            depth_k: self.cfg.controller.depth_k,
            initial_epoch: self.controller.state().initial_epoch,
            wus_epochs: e_wus,
            normal_epochs: e_normal,
            total_weights: w,
            total_biases: b_total,
            active_biases: b_active,
            weights_updated: totals.weights,
            biases_updated: totals.biases,
            predicted_updates: predicted_updates(e_wus, e_normal, w, b_active, b_total),
            predicted_updates_literal: predicted_updates_literal(e_wus, e_normal, w, b_total),
            baseline_updates,
            update_reduction_percent: if baseline_updates > 0 {
                reduction_percent(baseline_updates as f64, totals.total() as f64)?
            } else {
                0.0
            },
            total_wall_seconds: self.records.iter().map(|r| r.epoch_wall_seconds).sum(),
            backward_wall_seconds: self.records.iter().map(|r| r.backward_wall_seconds).sum(),
            backward_flops: self.records.iter().map(|r| r.backward_flops).sum(),
            final_train_accuracy: last.map_or(0.0, |r| r.train_accuracy),
            final_val_accuracy: last.map_or(0.0, |r| r.val_accuracy),
            final_train_loss: last.map_or(0.0, |r| r.train_loss),
        })
    }

    /// Runs every remaining epoch and writes the summary.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.epoch < self.cfg.sgd.epochs {
            self.run_epoch()?;
        }
        let summary = self.summary()?;
        if let Some(w) = &mut self.writer {
            w.summary(&summary)?;
        }
        Ok(TrainOutcome {
            records: self.records,
            events: self.events,
            ledger: self.ledger,
            histograms: self.histograms,
            summary,
        })
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }
}
