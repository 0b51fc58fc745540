//! SGD with heavy-ball momentum, weight decay and a step learning-rate schedule.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{GatePlan, Gradients, Network, ParamClass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_size_epochs: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Zero the momentum buffers of gated-off tensors whenever a step skips them.
    pub reset_momentum_on_skip: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate_init: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            step_size_epochs: 30,
            gamma: 0.1,
            batch_size: 128,
            epochs: 200,
            reset_momentum_on_skip: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("learning_rate_init", self.learning_rate_init),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.step_size_epochs == 0 {
            return Err(Error::Config("step_size_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// `lr_init · gamma^⌊epoch / step_size⌋`
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.step_size_epochs.max(1)) as i32;
        self.learning_rate_init * self.gamma.powi(steps)
    }

    /// True when the schedule differs between `epoch` and `epoch + 1`.
    pub fn lr_changes_after(&self, epoch: usize) -> bool {
        self.lr_at_epoch(epoch + 1) != self.lr_at_epoch(epoch)
    }
}

/// Elements written by one or more optimizer steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounts {
    pub weights: u64,
    pub biases: u64,
}

impl UpdateCounts {
    pub fn total(self) -> u64 {
        self.weights + self.biases
    }
}

impl Add for UpdateCounts {
    type Output = UpdateCounts;
    fn add(self, rhs: Self) -> Self {
        UpdateCounts {
            weights: self.weights + rhs.weights,
            biases: self.biases + rhs.biases,
        }
    }
}

impl AddAssign for UpdateCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Momentum buffers, one per parameter tensor, in [`Network::params`] order.
#[derive(Debug, Clone)]
pub struct SgdState<T> {
    buffers: Vec<(usize, ParamClass, Tensor<T>)>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(net: &Network<T>) -> Self {
        SgdState {
            buffers: net
                .params()
                .map(|(l, c, p)| (l, c, Tensor::zeros(p.shape().to_vec())))
                .collect(),
        }
    }

    pub fn buffer(&self, layer: usize, class: ParamClass) -> Option<&Tensor<T>> {
        self.buffers
            .iter()
            .find(|(l, c, _)| *l == layer && *c == class)
            .map(|(_, _, b)| b)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (usize, ParamClass, &Tensor<T>)> {
        self.buffers.iter().map(|(l, c, b)| (*l, *c, b))
    }
}

#[derive(Debug, Clone)]
pub struct Sgd<T> {
    cfg: SgdConfig,
    state: SgdState<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig, net: &Network<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            state: SgdState::new(net),
            cfg,
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SgdState<T> {
        &self.state
    }

    /// One update of every gated-on tensor:
    /// `g' = g + λp` (weights only), `v ← μv + g'`, `p ← p − ηv`.
    /// Gated-off tensors and their buffers are neither read nor written.
    pub fn step(
        &mut self,
        net: &mut Network<T>,
        grads: &Gradients<T>,
        plan: &GatePlan,
        lr: f64,
    ) -> Result<UpdateCounts> {
        let layout = net.parametric_layout();
        plan.validate(&layout)?;
        if grads.layer_count() != layout.len() {
            return Err(Error::Contract(format!(
                "gradients cover {} layers, network has {}",
                grads.layer_count(),
                layout.len()
            )));
        }
        for (layer, class, _) in &self.state.buffers {
            let gated = plan.gate(*layer).allows(*class);
            let present = grads.get(*layer, *class).is_some();
            if gated != present {
                return Err(Error::Contract(format!(
                    "layer {layer} {class:?}: gate is {gated} but gradient present is {present}"
                )));
            }
        }

        let lr = T::from_f64_lossy(lr);
        let mu = T::from_f64_lossy(self.cfg.momentum);
        let wd = T::from_f64_lossy(self.cfg.weight_decay);
        let mut counts = UpdateCounts::default();
        for (layer, class, buf) in &mut self.state.buffers {
            let Some(g) = grads.get(*layer, *class) else {
                if self.cfg.reset_momentum_on_skip {
                    buf.data_mut().iter_mut().for_each(|v| *v = T::zero());
                }
                continue;
            };
            let p = net
                .param_mut(*layer, *class)
                .ok_or_else(|| Error::Contract(format!("layer {layer} has no {class:?}")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim("sgd_step", g.shape(), p.shape()));
            }
            let decay = *class == ParamClass::Weights;
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
                let g_eff = if decay { gv + wd * *pv } else { gv };
                *vv = mu * *vv + g_eff;
                *pv -= lr * *vv;
            }
            let n = p.len() as u64;
            match class {
                ParamClass::Weights => counts.weights += n,
                ParamClass::Biases => counts.biases += n,
            }
        }
        Ok(counts)
    }
}
