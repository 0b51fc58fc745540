mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::fd::{check_network, numeric_grad, rel_error};
use wus_core::network::{LayerSpec, Network};
use wus_core::tensor::{
    batchnorm2d_grad_beta, batchnorm2d_grad_gamma, batchnorm2d_grad_input, batchnorm2d_train,
    conv2d, conv2d_grads, matmul, matmul_nt, matmul_tn, maxpool2d, maxpool2d_backward, relu,
    relu_backward,
};
use wus_core::Tensor;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn batch(input: &[usize], n: usize, classes: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut shape = vec![n];
    shape.extend_from_slice(input);
    let x = rand_tensor(&shape, &mut rng);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (x, labels)
}

fn check_specs(name: &str, specs: &[LayerSpec], input: &[usize], n: usize) {
    let mut kinked = 0;
    let mut checked = 0;
    for seed in 0..SEEDS {
        let mut net = Network::<f64>::build(specs, input, seed).unwrap();
        let (x, labels) = batch(input, n, net.classes(), seed);
        let r = check_network(&mut net, &x, &labels);
        assert!(
            r.max_rel_error < TOL,
            "{name} seed {seed}: relative error {:.3e}",
            r.max_rel_error
        );
        kinked += r.kinked;
        checked += r.checked;
    }
    assert!(checked > 0);
    assert!(
        kinked * 20 <= checked,
        "{name}: {kinked} kinked coordinates out of {}",
        kinked + checked
    );
}

#[test]
fn conv2d_adjoints_match_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stride, padding) = [(1, 0), (1, 1), (2, 1)][seed as usize % 3];
        let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
        let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let out = conv2d(&x, &k, &b, stride, padding).unwrap();
        let r = rand_tensor(out.shape(), &mut rng);
        let (gi, gk, gb) = conv2d_grads(&x, &k, &r, stride, padding).unwrap();

        let ni = numeric_grad(&x, |x| dot(&conv2d(x, &k, &b, stride, padding).unwrap(), &r));
        let nk = numeric_grad(&k, |k| dot(&conv2d(&x, k, &b, stride, padding).unwrap(), &r));
        let nb = numeric_grad(&b, |b| dot(&conv2d(&x, &k, b, stride, padding).unwrap(), &r));
        assert!(rel_error(gi.data(), &ni) < TOL, "input, seed {seed}");
        assert!(rel_error(gk.data(), &nk) < TOL, "kernels, seed {seed}");
        assert!(rel_error(gb.data(), &nb) < TOL, "bias, seed {seed}");
    }
}

#[test]
fn matmul_adjoints_match_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[4, 6], &mut rng);
        let b = rand_tensor(&[6, 3], &mut rng);
        let r = rand_tensor(&[4, 3], &mut rng);
        // L = <r, a·b>: dL/da = r·bᵀ, dL/db = aᵀ·r
        let ga = matmul_nt(&r, &b).unwrap();
        let gb = matmul_tn(&a, &r).unwrap();
        let na = numeric_grad(&a, |a| dot(&matmul(a, &b).unwrap(), &r));
        let nb = numeric_grad(&b, |b| dot(&matmul(&a, b).unwrap(), &r));
        assert!(rel_error(ga.data(), &na) < TOL);
        assert!(rel_error(gb.data(), &nb) < TOL);
    }
}

#[test]
fn maxpool_adjoint_matches_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // distinct, well-separated values keep every winner stable under ±h
        let mut values: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| i as f64 * 0.01).collect();
        for i in (1..values.len()).rev() {
            values.swap(i, rng.random_range(0..=i));
        }
        let x = Tensor::new(vec![2, 2, 6, 6], values).unwrap();
        let (out, argmax) = maxpool2d(&x, 2, 2).unwrap();
        let r = rand_tensor(out.shape(), &mut rng);
        let gi = maxpool2d_backward(&r, &argmax, x.shape()).unwrap();
        let ni = numeric_grad(&x, |x| dot(&maxpool2d(x, 2, 2).unwrap().0, &r));
        assert!(rel_error(gi.data(), &ni) < TOL, "seed {seed}");
    }
}

#[test]
fn relu_adjoint_matches_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep inputs at least 0.1 away from the kink
        let x = rand_tensor(&[3, 7], &mut rng).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
        let r = rand_tensor(&[3, 7], &mut rng);
        let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
        let gi = relu_backward(&mask, &r).unwrap();
        let ni = numeric_grad(&x, |x| dot(&relu(x), &r));
        assert!(rel_error(gi.data(), &ni) < TOL);
    }
}

#[test]
fn batchnorm_adjoints_match_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let gamma = rand_tensor(&[2], &mut rng);
        let beta = rand_tensor(&[2], &mut rng);
        let r = rand_tensor(x.shape(), &mut rng);
        let eps = 1e-5;
        let (_, stats) = batchnorm2d_train(&x, gamma.data(), beta.data(), eps).unwrap();
        let gx = batchnorm2d_grad_input(&r, &stats.xhat, gamma.data(), &stats.inv_std).unwrap();
        let gg = batchnorm2d_grad_gamma(&r, &stats.xhat).unwrap();
        let gb = batchnorm2d_grad_beta(&r).unwrap();
        let f = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            dot(&batchnorm2d_train(x, g.data(), b.data(), eps).unwrap().0, &r)
        };
        let nx = numeric_grad(&x, |x| f(x, &gamma, &beta));
        let ng = numeric_grad(&gamma, |g| f(&x, g, &beta));
        let nb = numeric_grad(&beta, |b| f(&x, &gamma, b));
        assert!(rel_error(gx.data(), &nx) < TOL, "input, seed {seed}");
        assert!(rel_error(gg.data(), &ng) < TOL, "gamma, seed {seed}");
        assert!(rel_error(gb.data(), &nb) < TOL, "beta, seed {seed}");
    }
}

#[test]
fn dense_network_gradients() {
    check_specs(
        "dense",
        &[LayerSpec::Flatten, LayerSpec::dense(5), LayerSpec::dense(3)],
        &[6],
        4,
    );
}

#[test]
fn relu_network_gradients() {
    check_specs(
        "relu",
        &[LayerSpec::dense(8), LayerSpec::Relu, LayerSpec::dense(3)],
        &[5],
        4,
    );
}

#[test]
fn conv_network_gradients() {
    check_specs(
        "conv2d",
        &[LayerSpec::conv(3, 3, 1, 1), LayerSpec::Flatten, LayerSpec::dense(4)],
        &[2, 5, 5],
        3,
    );
}

#[test]
fn pool_network_gradients() {
    check_specs(
        "maxpool2d",
        &[LayerSpec::conv(2, 3, 1, 1), LayerSpec::pool(2), LayerSpec::Flatten, LayerSpec::dense(3)],
        &[1, 6, 6],
        3,
    );
}

#[test]
fn batchnorm_network_gradients() {
    check_specs(
        "batchnorm2d",
        &[LayerSpec::conv(3, 3, 1, 0), LayerSpec::batchnorm(), LayerSpec::Flatten, LayerSpec::dense(3)],
        &[2, 5, 5],
        4,
    );
}

#[test]
fn composed_network_gradients() {
    check_specs(
        "conv-relu-pool-dense",
        &[
            LayerSpec::conv(4, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::pool(2),
            LayerSpec::conv(4, 3, 1, 1),
            LayerSpec::batchnorm(),
            LayerSpec::Relu,
            LayerSpec::pool(2),
            LayerSpec::Flatten,
            LayerSpec::dense(6),
            LayerSpec::Relu,
            LayerSpec::dense(3),
        ],
        &[2, 8, 8],
        3,
    );
}
