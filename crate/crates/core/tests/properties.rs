use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wus_core::controller::{rolling_std, Controller, ControllerConfig, Phase, Variant};
use wus_core::data::{batches, synthetic_dataset, BatchPlan};
use wus_core::metrics::Histogram;
use wus_core::network::{softmax_cross_entropy, GatePlan, LayerSpec, Network, ParamClass};
use wus_core::optim::{Sgd, SgdConfig};
use wus_core::Tensor;

const LAYOUT: [bool; 6] = [true, false, true, false, true, true];

/// Accuracy traces that rise, plateau and wobble so every branch gets exercised.
fn accuracy_trace() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u8..4, 0.0f64..3.0), 10..90).prop_map(|steps| {
        let mut acc = 40.0;
        steps
            .into_iter()
            .map(|(kind, amount)| {
                acc = match kind {
                    0 => (acc + amount).min(100.0),
                    1 => (acc - amount * 0.1).max(0.0),
                    _ => acc,
                };
                // quantize to a 0.1 grid so exact ties happen
                (acc * 10.0).round() / 10.0
            })
            .collect()
    })
}

fn drive(cfg: &ControllerConfig, trace: &[f64], lr_step: usize) -> (Vec<Phase>, Controller, Vec<String>) {
    let mut c = Controller::new(cfg.clone(), &LAYOUT).unwrap();
    let mut phases = vec![c.phase()];
    let mut reasons = Vec::new();
    for (e, &acc) in trace.iter().enumerate() {
        let changed = (e + 1) % lr_step == 0;
        let d = c.on_validation_end(acc, e, changed, 0.1).unwrap();
        phases.push(d.phase);
        reasons.push(d.event.reason);
    }
    (phases, c, reasons)
}

fn controller_cfg(variant: Variant, patience: usize, interlude: usize) -> ControllerConfig {
    ControllerConfig {
        variant,
        patience,
        normal_interlude_epochs: interlude,
        ..ControllerConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn baseline_never_gates(trace in accuracy_trace()) {
        let (phases, _, _) = drive(&controller_cfg(Variant::Baseline, 7, 1), &trace, 30);
        prop_assert!(phases.iter().all(|p| *p == Phase::Normal));
    }

    #[test]
    fn interludes_have_configured_length(
        trace in accuracy_trace(), patience in 1usize..8, interlude in 1usize..4,
    ) {
        let (phases, _, _) = drive(&controller_cfg(Variant::Wus, patience, interlude), &trace, 1000);
        let mut run = 0;
        for (i, p) in phases.iter().enumerate() {
            if *p == Phase::NormalInterlude {
                run += 1;
            } else {
                if run > 0 {
                    prop_assert_eq!(run, interlude, "run ending at {}", i);
                }
                run = 0;
            }
        }
        prop_assert!(run <= interlude);
    }

    #[test]
    fn stagnation_follows_exactly_patience_misses(trace in accuracy_trace(), patience in 1usize..8) {
        let cfg = controller_cfg(Variant::Wus, patience, 1);
        let mut c = Controller::new(cfg, &LAYOUT).unwrap();
        let mut history: Vec<(Phase, String)> = Vec::new();
        for (e, &acc) in trace.iter().enumerate() {
            let phase = c.phase();
            let d = c.on_validation_end(acc, e, false, 0.1).unwrap();
            prop_assert!(c.state().counter <= patience);
            history.push((phase, d.event.reason.clone()));
            if d.event.reason == "stagnation" {
                let tail = &history[history.len() - patience..];
                prop_assert!(tail.iter().all(|(p, _)| *p == Phase::Wus));
                prop_assert!(tail[..patience - 1].iter().all(|(_, r)| r == "no_improvement"));
                if history.len() > patience {
                    let before = &history[history.len() - patience - 1];
                    prop_assert!(!(before.0 == Phase::Wus && before.1 == "no_improvement"));
                }
            }
        }
    }

    #[test]
    fn lr_variant_switches_exactly_on_schedule(trace in accuracy_trace(), lr_step in 2usize..20) {
        let (phases, c, _) = drive(&controller_cfg(Variant::WusLr, 7, 1), &trace, lr_step);
        let Some(initial) = c.state().initial_epoch else {
            prop_assert!(phases.iter().all(|p| *p == Phase::Warmup));
            return Ok(());
        };
        // phases[e] is the phase epoch e trains under
        let starts: Vec<usize> = (initial..phases.len())
            .filter(|&e| phases[e] == Phase::NormalInterlude && phases[e - 1] != Phase::NormalInterlude)
            .collect();
        let changes: Vec<usize> = (initial..phases.len()).filter(|e| e % lr_step == 0).collect();
        prop_assert_eq!(starts, changes);
    }

    #[test]
    fn warmup_exactly_before_initial_epoch(trace in accuracy_trace(), variant in prop_oneof![Just(Variant::Wus), Just(Variant::WusLr)]) {
        let (phases, c, _) = drive(&controller_cfg(variant, 5, 1), &trace, 30);
        let initial = c.state().initial_epoch.unwrap_or(usize::MAX);
        for (e, p) in phases.iter().enumerate() {
            prop_assert_eq!(*p == Phase::Warmup, e < initial);
        }
    }

    #[test]
    fn replay_is_bitwise_identical(trace in accuracy_trace(), lr_step in 2usize..40) {
        for variant in [Variant::Wus, Variant::WusLr] {
            let cfg = controller_cfg(variant, 4, 2);
            let a = drive(&cfg, &trace, lr_step);
            let b = drive(&cfg, &trace, lr_step);
            prop_assert_eq!(a.0, b.0);
            prop_assert_eq!(a.1.state(), b.1.state());
        }
    }

    #[test]
    fn rolling_std_matches_moment_formula(values in prop::collection::vec(0.0f64..100.0, 1..20), window in 1usize..8) {
        let tail = &values[values.len().saturating_sub(window)..];
        let n = tail.len() as f64;
        let mean = tail.iter().sum::<f64>() / n;
        let var = (tail.iter().map(|v| v * v).sum::<f64>() / n - mean * mean).max(0.0);
        let got = rolling_std(&values, window).unwrap();
        prop_assert!((got - var.sqrt()).abs() < 1e-6, "{} vs {}", got, var.sqrt());
    }

    #[test]
    fn histogram_conserves_count(values in prop::collection::vec(-1e3f64..1e3, 1..200), bins in 2usize..40) {
        let h = Histogram::from_values(values.iter().copied(), bins).unwrap();
        prop_assert_eq!(h.total(), values.len() as u64);
        prop_assert_eq!(h.counts.len(), bins);
    }

    #[test]
    fn permutation_is_bijection(seed in any::<u64>(), epoch in 0usize..500, n in 1usize..300) {
        let plan = BatchPlan::new(seed, 7).unwrap();
        let mut p = plan.permutation(epoch, n);
        prop_assert_eq!(&p, &plan.permutation(epoch, n));
        p.sort_unstable();
        prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
    }
}

fn small_net(seed: u64) -> Network<f64> {
    Network::build(
        &[
            LayerSpec::conv(2, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::batchnorm(),
            LayerSpec::Flatten,
            LayerSpec::dense(5),
            LayerSpec::dense(3),
        ],
        &[1, 4, 4],
        seed,
    )
    .unwrap()
}

fn step_once(net: &mut Network<f64>, sgd: &mut Sgd<f64>, plan: &GatePlan, x: &Tensor<f64>) {
    let (logits, tape) = net.forward_for_plan(x, true, plan).unwrap();
    let out = softmax_cross_entropy(&logits, &[0, 1, 2]).unwrap();
    let g = net.backward(&tape, &out.grad_logits, plan).unwrap();
    sgd.step(net, &g, plan, 0.1).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gated_off_tensors_never_change(seed in 0u64..500, k in 1usize..4, steps in 1usize..6) {
        let mut net = small_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(vec![3, 1, 4, 4], 0.0, 1.0, &mut rng);
        let mut sgd = Sgd::new(SgdConfig::default(), &net).unwrap();
        let normal = net.normal_plan();
        step_once(&mut net, &mut sgd, &normal, &x);

        let plan = GatePlan::last_k_biases(&net.parametric_layout(), k).unwrap();
        let snapshot = |net: &Network<f64>, sgd: &Sgd<f64>| -> Vec<(usize, ParamClass, u64, u64)> {
            net.params()
                .filter(|(l, c, _)| !plan.gate(*l).allows(*c))
                .map(|(l, c, p)| (l, c, p.checksum(), sgd.state().buffer(l, c).unwrap().checksum()))
                .collect()
        };
        let before = snapshot(&net, &sgd);
        for _ in 0..steps {
            step_once(&mut net, &mut sgd, &plan, &x);
        }
        prop_assert_eq!(before, snapshot(&net, &sgd));
    }

    #[test]
    fn zero_gradient_step_is_identity(seed in 0u64..500) {
        let mut net = small_net(seed);
        let plan = net.normal_plan();
        let cfg = SgdConfig { weight_decay: 0.0, ..SgdConfig::default() };
        let mut sgd = Sgd::new(cfg, &net).unwrap();
        let x = Tensor::full(vec![3, 1, 4, 4], 0.5);
        let (_, tape) = net.forward_for_plan(&x, true, &plan).unwrap();
        let mut g = net.backward(&tape, &Tensor::zeros(vec![3, 3]), &plan).unwrap();
        for l in 0..g.layer_count() {
            for c in [ParamClass::Weights, ParamClass::Biases] {
                if let Some(t) = g.get_mut(l, c) {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let before: Vec<u64> = net.params().map(|(_, _, p)| p.checksum()).collect();
        sgd.step(&mut net, &g, &plan, 0.1).unwrap();
        let after: Vec<u64> = net.params().map(|(_, _, p)| p.checksum()).collect();
        prop_assert_eq!(before, after);
        prop_assert!(sgd.state().buffers().all(|(_, _, b)| b.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn full_plan_steps_are_deterministic(seed in 0u64..500, steps in 1usize..5) {
        let run = || {
            let mut net = small_net(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(vec![3, 1, 4, 4], 0.0, 1.0, &mut rng);
            let mut sgd = Sgd::new(SgdConfig::default(), &net).unwrap();
            let plan = net.normal_plan();
            for _ in 0..steps {
                step_once(&mut net, &mut sgd, &plan, &x);
            }
            net.params().map(|(_, _, p)| p.checksum()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn batches_cover_each_sample_once(seed in 0u64..100, n in 2usize..60, size in 1usize..17, epoch in 0usize..5) {
        let data = synthetic_dataset(seed, n, 2, &[1, 1, 2]).unwrap();
        let plan = BatchPlan::new(seed, size).unwrap();
        let sizes: Vec<usize> = batches::<f32>(&data, &plan, epoch).map(|b| b.unwrap().1.len()).collect();
        prop_assert_eq!(sizes.len(), n.div_ceil(size));
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes[..sizes.len() - 1].iter().all(|&s| s == size));
    }
}
