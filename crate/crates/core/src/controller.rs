//! Phase controller deciding, once per epoch, whether the next epoch trains
//! normally or skips weight updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::GatePlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "wus")]
    Wus,
    #[serde(rename = "wus-lr")]
    WusLr,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Wus => "wus",
            Variant::WusLr => "wus-lr",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "wus" => Ok(Variant::Wus),
            "wus-lr" | "wus_lr" => Ok(Variant::WusLr),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected baseline, wus or wus-lr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Every epoch of a baseline run.
    #[serde(rename = "NORMAL")]
    Normal,
    #[serde(rename = "WARMUP")]
    Warmup,
    #[serde(rename = "WUS_PHASE")]
    Wus,
    #[serde(rename = "NORMAL_INTERLUDE")]
    NormalInterlude,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Normal => "NORMAL",
            Phase::Warmup => "WARMUP",
            Phase::Wus => "WUS_PHASE",
            Phase::NormalInterlude => "NORMAL_INTERLUDE",
        }
    }

    pub fn skips_weights(self) -> bool {
        self == Phase::Wus
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Phase::Normal, Phase::Warmup, Phase::Wus, Phase::NormalInterlude]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown phase {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub variant: Variant,
    /// Threshold on the rolling std of validation accuracy, in percent.
    pub std_threshold: f64,
    pub std_window: usize,
    pub patience: usize,
    pub delta: f64,
    pub depth_k: usize,
    pub normal_interlude_epochs: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            variant: Variant::Wus,
            std_threshold: 0.71,
            std_window: 5,
            patience: 7,
            delta: 0.0,
            depth_k: 1,
            normal_interlude_epochs: 1,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, parametric_layers: usize) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.std_threshold > 0.0 && self.std_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "std_threshold must be positive, got {}",
                self.std_threshold
            )));
        }
        if self.std_window < 2 {
            return Err(Error::Config("std_window must be at least 2".into()));
        }
        if !self.delta.is_finite() {
            return Err(Error::Config("delta must be finite".into()));
        }
        if self.normal_interlude_epochs == 0 {
            return Err(Error::Config("normal_interlude_epochs must be at least 1".into()));
        }
        if self.depth_k == 0 || self.depth_k > parametric_layers {
            return Err(Error::Config(format!(
                "depth_k = {} outside 1..={parametric_layers} parametric layers",
                self.depth_k
            )));
        }
        Ok(())
    }
}

/// Population standard deviation of the last `min(window, len)` values.
pub fn rolling_std(history: &[f64], window: usize) -> Result<f64> {
    if history.is_empty() || window == 0 {
        return Err(Error::Contract("rolling_std needs a non-empty history and window".into()));
    }
    let tail = &history[history.len().saturating_sub(window)..];
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// All gates on outside the WUS phase; inside it, biases of the last `depth_k`
/// parametric layers only.
pub fn gate_plan_for(phase: Phase, depth_k: usize, parametric: &[bool]) -> Result<GatePlan> {
    match phase {
        Phase::Wus => GatePlan::last_k_biases(parametric, depth_k),
        _ => {
            let total = parametric.iter().filter(|&&p| p).count();
            if depth_k == 0 || depth_k > total {
                return Err(Error::Config(format!(
                    "depth_k = {depth_k} outside 1..={total} parametric layers"
                )));
            }
            Ok(GatePlan::normal(parametric))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub phase: Phase,
    pub initial_epoch: Option<usize>,
    pub best_accuracy: Option<f64>,
    pub counter: usize,
    pub previous_epoch: Option<usize>,
    pub accuracy_history: Vec<f64>,
    /// Rolling std after each epoch; `None` while fewer than two accuracies exist.
    pub std_history: Vec<Option<f64>>,
    pub interlude_left: usize,
    pub last_epoch: Option<usize>,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerEvent {
    pub epoch: usize,
    pub phase: Phase,
    pub reason: String,
    pub std: Option<f64>,
    pub counter: usize,
    pub lr: f64,
    pub next_phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDecision {
    /// Phase for the epoch after the one just validated.
    pub phase: Phase,
    pub plan: GatePlan,
    pub event: ControllerEvent,
}

#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    parametric: Vec<bool>,
    state: ControllerState,
}

impl Controller {
    pub fn new(cfg: ControllerConfig, parametric: &[bool]) -> Result<Self> {
        cfg.validate(parametric.iter().filter(|&&p| p).count())?;
        let phase = match cfg.variant {
            Variant::Baseline => Phase::Normal,
            _ => Phase::Warmup,
        };
        Ok(Controller {
            cfg,
            parametric: parametric.to_vec(),
            state: ControllerState {
                phase,
                initial_epoch: None,
                best_accuracy: None,
                counter: 0,
                previous_epoch: None,
                accuracy_history: Vec::new(),
                std_history: Vec::new(),
                interlude_left: 0,
                last_epoch: None,
            },
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    /// Phase of the upcoming (not yet validated) epoch.
    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn plan(&self) -> GatePlan {
        gate_plan_for(self.state.phase, self.cfg.depth_k, &self.parametric)
            .expect("depth_k validated at construction")
    }

    /// Latches the initial epoch once two successive rolling stds fall below
    /// the threshold. Expects the current epoch's std to be recorded already.
    pub fn detect_initial_epoch(&mut self, epoch: usize) -> Option<usize> {
        if self.state.initial_epoch.is_some() {
            return None;
        }
        let stds = &self.state.std_history;
        let [.., Some(prev), Some(cur)] = stds.as_slice() else {
            return None;
        };
        if *prev < self.cfg.std_threshold && *cur < self.cfg.std_threshold {
            self.state.initial_epoch = Some(epoch + 1);
            return Some(epoch + 1);
        }
        None
    }

    /// Algorithm-1 bookkeeping: a non-improving epoch bumps the counter when
    /// `count` is set; an improving (or tying) one resets it.
    fn track_best(&mut self, accuracy: f64, count: bool) -> bool {
        match self.state.best_accuracy {
            Some(best) if accuracy < best + self.cfg.delta => {
                if count {
                    self.state.counter += 1;
                }
                false
            }
            _ => {
                self.state.best_accuracy = Some(accuracy);
                self.state.counter = 0;
                true
            }
        }
    }

    fn start_interlude(&mut self, epoch: usize) {
        self.state.counter = 0;
        self.state.previous_epoch = Some(epoch);
        self.state.interlude_left = self.cfg.normal_interlude_epochs;
    }

    /// Consumes epoch `epoch`'s validation accuracy (percent). `lr_changed`
    /// says whether the learning rate of epoch `epoch + 1` differs from this
    /// epoch's; `lr` is only logged.
    pub fn on_validation_end(
        &mut self,
        accuracy: f64,
        epoch: usize,
        lr_changed: bool,
        lr: f64,
    ) -> Result<PhaseDecision> {
        if let Some(last) = self.state.last_epoch {
            if epoch != last + 1 {
                return Err(Error::Contract(format!(
                    "controller expected epoch {}, got {epoch}",
                    last + 1
                )));
            }
        }
        if !accuracy.is_finite() {
            return Err(Error::Contract(format!("non-finite accuracy at epoch {epoch}")));
        }
        self.state.last_epoch = Some(epoch);
        self.state.accuracy_history.push(accuracy);
        let std = if self.state.accuracy_history.len() >= 2 {
            Some(rolling_std(&self.state.accuracy_history, self.cfg.std_window)?)
        } else {
            None
        };
        self.state.std_history.push(std);

        let current = self.state.phase;
        let (next, reason) = match (self.cfg.variant, current) {
            (Variant::Baseline, _) => (Phase::Normal, "baseline"),
            (variant, Phase::Warmup) => {
                self.track_best(accuracy, false);
                if self.detect_initial_epoch(epoch).is_none() {
                    (Phase::Warmup, "warmup")
                } else if variant == Variant::WusLr && lr_changed {
                    self.start_interlude(epoch);
                    (Phase::NormalInterlude, "lr_changed")
                } else {
                    (Phase::Wus, "initial_epoch")
                }
            }
            (Variant::Wus, Phase::Wus) => {
                if self.track_best(accuracy, true) {
                    (Phase::Wus, "improved")
                } else if self.state.counter >= self.cfg.patience {
                    self.start_interlude(epoch);
                    (Phase::NormalInterlude, "stagnation")
                } else {
                    (Phase::Wus, "no_improvement")
                }
            }
            (Variant::WusLr, Phase::Wus) => {
                if lr_changed {
                    self.start_interlude(epoch);
                    (Phase::NormalInterlude, "lr_changed")
                } else {
                    (Phase::Wus, "lr_unchanged")
                }
            }
            (variant, Phase::NormalInterlude) => {
                if variant == Variant::Wus {
                    self.track_best(accuracy, false);
                }
                self.state.interlude_left = self.state.interlude_left.saturating_sub(1);
                if self.state.interlude_left > 0 {
                    (Phase::NormalInterlude, "interlude")
                } else if variant == Variant::WusLr && lr_changed {
                    self.start_interlude(epoch);
                    (Phase::NormalInterlude, "lr_changed")
                } else {
                    (Phase::Wus, "interlude_end")
                }
            }
            (_, Phase::Normal) => {
                return Err(Error::Contract("NORMAL phase outside a baseline run".into()));
            }
        };
        self.state.phase = next;
        Ok(PhaseDecision {
            phase: next,
            plan: self.plan(),
            event: ControllerEvent {
                epoch,
                phase: current,
                reason: reason.to_string(),
                std,
                counter: self.state.counter,
                lr,
                next_phase: next,
            },
        })
    }
}
