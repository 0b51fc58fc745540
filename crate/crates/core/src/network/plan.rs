//! Per-layer gradient gates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two parameter classes a gate can switch independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamClass {
    Weights,
    Biases,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGate {
    pub grad_weights: bool,
    pub grad_biases: bool,
}

impl LayerGate {
    pub const OFF: LayerGate = LayerGate {
        grad_weights: false,
        grad_biases: false,
    };

    pub fn any(self) -> bool {
        self.grad_weights || self.grad_biases
    }

    pub fn allows(self, class: ParamClass) -> bool {
        match class {
            ParamClass::Weights => self.grad_weights,
            ParamClass::Biases => self.grad_biases,
        }
    }
}

/// Which parameter classes of which layers receive gradients and updates.
///
/// Non-parametric layers always carry [`LayerGate::OFF`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatePlan {
    gates: Vec<LayerGate>,
}

impl GatePlan {
    /// Everything on for every parametric layer.
    pub fn normal(parametric: &[bool]) -> Self {
        GatePlan {
            gates: parametric
                .iter()
                .map(|&p| LayerGate {
                    grad_weights: p,
                    grad_biases: p,
                })
                .collect(),
        }
    }

    pub fn all_off(layer_count: usize) -> Self {
        GatePlan {
            gates: vec![LayerGate::OFF; layer_count],
        }
    }

    /// Biases of the last `k` parametric layers on, all weights off.
    pub fn last_k_biases(parametric: &[bool], k: usize) -> Result<Self> {
        let total = parametric.iter().filter(|&&p| p).count();
        if k == 0 || k > total {
            return Err(Error::Config(format!(
                "depth k = {k} outside 1..={total} parametric layers"
            )));
        }
        let mut plan = Self::all_off(parametric.len());
        let chosen = parametric
            .iter()
            .enumerate()
            .rev()
            .filter(|(_, &p)| p)
            .take(k);
        for (i, _) in chosen {
            plan.gates[i].grad_biases = true;
        }
        Ok(plan)
    }

    pub fn from_gates(gates: Vec<LayerGate>) -> Self {
        GatePlan { gates }
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn gate(&self, layer: usize) -> LayerGate {
        self.gates.get(layer).copied().unwrap_or(LayerGate::OFF)
    }

    pub fn gates(&self) -> &[LayerGate] {
        &self.gates
    }

    /// Index of the shallowest layer with any gate on; `len()` when all are off.
    /// Backward stops here: no cotangent is propagated below it.
    pub fn truncation_index(&self) -> usize {
        self.gates.iter().position(|g| g.any()).unwrap_or(self.gates.len())
    }

    pub fn is_normal_for(&self, parametric: &[bool]) -> bool {
        *self == Self::normal(parametric)
    }

    pub fn any_weights(&self) -> bool {
        self.gates.iter().any(|g| g.grad_weights)
    }

    /// Rejects plans that do not match the network's layer layout.
    pub fn validate(&self, parametric: &[bool]) -> Result<()> {
        if self.gates.len() != parametric.len() {
            return Err(Error::Contract(format!(
                "plan covers {} layers, network has {}",
                self.gates.len(),
                parametric.len()
            )));
        }
        for (i, (g, &p)) in self.gates.iter().zip(parametric).enumerate() {
            if g.any() && !p {
                return Err(Error::Contract(format!(
                    "plan gates on non-parametric layer {i}"
                )));
            }
        }
        Ok(())
    }
}
