use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wus_core::network::{softmax_cross_entropy, GatePlan, KernelKind, LayerSpec, Network};
use wus_core::Tensor;

/// A random sequential net: optional conv blocks, flatten, dense stack.
fn arch() -> impl Strategy<Value = (Vec<LayerSpec>, [usize; 3])> {
    let conv_block = (1usize..4, prop::bool::ANY, prop::bool::ANY, prop::bool::ANY);
    (
        prop::collection::vec(conv_block, 0..3),
        prop::collection::vec(2usize..7, 0..3),
        1usize..3,
        2usize..5,
    )
        .prop_map(|(convs, dense, channels, classes)| {
            let mut specs = Vec::new();
            for (filters, bn, relu, pool) in convs {
                specs.push(LayerSpec::conv(filters, 3, 1, 1));
                if bn {
                    specs.push(LayerSpec::batchnorm());
                }
                if relu {
                    specs.push(LayerSpec::Relu);
                }
                if pool {
                    specs.push(LayerSpec::pool(2));
                }
            }
            specs.push(LayerSpec::Flatten);
            for units in dense {
                specs.push(LayerSpec::dense(units));
                specs.push(LayerSpec::Relu);
            }
            specs.push(LayerSpec::dense(classes));
            (specs, [channels, 8, 8])
        })
}

fn logits_grad(net: &mut Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> Tensor<f64> {
    let (logits, _) = net.clone().forward(x, true).unwrap();
    softmax_cross_entropy(&logits, labels).unwrap().grad_logits
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn truncated_gradients_equal_full_gradients((specs, input) in arch(), seed in 0u64..1000) {
        let mut net = Network::<f64>::build(&specs, &input, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(vec![3, input[0], input[1], input[2]], -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..3).map(|i| i % net.classes()).collect();
        let dy = logits_grad(&mut net, &x, &labels);

        let full_plan = net.normal_plan();
        let (_, tape) = net.clone().forward(&x, true).unwrap();
        let full = net.backward(&tape, &dy, &full_plan).unwrap();

        let layout = net.parametric_layout();
        for k in 1..=net.parametric_count() {
            let plan = GatePlan::last_k_biases(&layout, k).unwrap();
            let t = plan.truncation_index();
            let (_, tape) = net.clone().forward_for_plan(&x, true, &plan).unwrap();
            let part = net.backward(&tape, &dy, &plan).unwrap();

            for (layer, class, g) in part.entries() {
                prop_assert!(plan.gate(layer).allows(class));
                let reference = full.get(layer, class).unwrap();
                let same = g.data().iter().zip(reference.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same, "k={} layer {} {:?} differs", k, layer, class);
            }
            prop_assert_eq!(part.len(), k);
            prop_assert_eq!(part.count_kernels(KernelKind::WeightGrad), 0);
            prop_assert!(part.trace().iter().all(|c| c.layer >= t));
            prop_assert!(net.backward_flops(&plan, 3) < net.backward_flops(&full_plan, 3));
        }
    }
}

#[test]
fn all_off_plan_invokes_nothing() {
    let specs = [LayerSpec::conv(2, 3, 1, 1), LayerSpec::Relu, LayerSpec::Flatten, LayerSpec::dense(3)];
    let mut net = Network::<f64>::build(&specs, &[1, 4, 4], 0).unwrap();
    let plan = GatePlan::all_off(specs.len());
    let x = Tensor::full(vec![2, 1, 4, 4], 0.5);
    let (_, tape) = net.forward_for_plan(&x, true, &plan).unwrap();
    let g = net.backward(&tape, &Tensor::full(vec![2, 3], 0.1), &plan).unwrap();
    assert!(g.trace().is_empty());
    assert_eq!(tape.retained_elements(), 0);
}
