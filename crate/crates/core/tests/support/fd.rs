//! Central finite-difference oracle for network parameter gradients.
//!
//! Independent of the backward implementation: it only calls the forward
//! pass and the loss. Coordinates whose ±h perturbation flips a ReLU mask or
//! a pooling winner sit on a kink where the function is not differentiable;
//! they are reported separately instead of compared.

#![allow(dead_code)]

use wus_core::network::{softmax_cross_entropy, Network, ParamClass};
use wus_core::Tensor;

pub const H: f64 = 1e-3;

pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinked: usize,
}

fn loss_and_signature(net: &mut Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> (f64, u64) {
    let (logits, tape) = net.forward(x, true).unwrap();
    let out = softmax_cross_entropy(&logits, labels).unwrap();
    (out.loss, tape.activation_signature())
}

/// Relative error of two gradient tensors: ‖a − n‖∞ / max(‖a‖∞, ‖n‖∞).
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Checks every parameter tensor's analytic gradient (NORMAL plan) against
/// central differences of the mean cross-entropy.
pub fn check_network(net: &mut Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> FdReport {
    let plan = net.normal_plan();
    let (logits, tape) = net.forward(x, true).unwrap();
    let base_sig = tape.activation_signature();
    let out = softmax_cross_entropy(&logits, labels).unwrap();
    let grads = net.backward(&tape, &out.grad_logits, &plan).unwrap();

    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        kinked: 0,
    };
    let targets: Vec<(usize, ParamClass)> = net.params().map(|(l, c, _)| (l, c)).collect();
    for (layer, class) in targets {
        let analytic = grads
            .get(layer, class)
            .unwrap_or_else(|| panic!("normal plan must produce a gradient for {layer}/{class:?}"))
            .data()
            .to_vec();
        let len = analytic.len();
        let mut a_kept = Vec::with_capacity(len);
        let mut n_kept = Vec::with_capacity(len);
        for i in 0..len {
            let orig = net.param(layer, class).unwrap().data()[i];
            net.param_mut(layer, class).unwrap().data_mut()[i] = orig + H;
            let (plus, sig_p) = loss_and_signature(net, x, labels);
            net.param_mut(layer, class).unwrap().data_mut()[i] = orig - H;
            let (minus, sig_m) = loss_and_signature(net, x, labels);
            net.param_mut(layer, class).unwrap().data_mut()[i] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.kinked += 1;
                continue;
            }
            a_kept.push(analytic[i]);
            n_kept.push((plus - minus) / (2.0 * H));
        }
        report.checked += a_kept.len();
        report.max_rel_error = report.max_rel_error.max(rel_error(&a_kept, &n_kept));
    }
    report
}

/// Central differences of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + H;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - H;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * H)
        })
        .collect()
}
