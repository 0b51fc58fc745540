//! Sequential networks with plan-gated, truncated backpropagation.
//!
//! A [`GatePlan`] decides, per layer, whether weight and/or bias gradients are
//! wanted. Backward walks from the output down to the plan's truncation index
//! and stops there. Within that range a layer whose weight gate is off never
//! runs its weight-gradient kernel; the bias gradient only needs the layer's
//! output cotangent. Every kernel invocation is recorded in a trace so callers
//! can verify what ran.

mod layer;
mod loss;
mod plan;
mod snapshot;

pub use layer::{Layer, LayerSpec};
pub use loss::{softmax_cross_entropy, LossOutput};
pub use plan::{GatePlan, LayerGate, ParamClass};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    self, batchnorm2d_eval, batchnorm2d_grad_beta, batchnorm2d_grad_gamma, batchnorm2d_grad_input,
    batchnorm2d_train, conv2d_forward, conv2d_grad_bias, conv2d_grad_input, conv2d_grad_kernels,
    matmul, matmul_nt, matmul_tn, maxpool2d, maxpool2d_backward, ConvGeometry, Tensor,
};

use layer::{BN_EPS, BN_MOMENTUM};

#[derive(Debug, Clone)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    /// Per-sample shape entering each layer, plus the final output shape.
    shapes: Vec<Vec<usize>>,
}

/// Which gradient kernel ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    WeightGrad,
    BiasGrad,
    /// Cotangent propagated to the layer's input (includes activations/pooling).
    InputGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelCall {
    pub layer: usize,
    pub kind: KernelKind,
}

#[derive(Debug, Clone)]
enum TapeEntry<T> {
    Skipped,
    Dense {
        input: Option<Tensor<T>>,
    },
    Conv {
        geometry: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    Relu {
        mask: Option<Vec<bool>>,
    },
    Pool {
        argmax: Option<Vec<usize>>,
        input_shape: Vec<usize>,
    },
    BatchNorm {
        xhat: Option<Tensor<T>>,
        inv_std: Vec<T>,
        training: bool,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
}

/// Intermediates recorded by a forward pass for the matching backward.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    batch: usize,
    entries: Vec<TapeEntry<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Scalars held by the tape (memory footprint proxy).
    pub fn retained_elements(&self) -> usize {
        self.entries
            .iter()
            .map(|e| match e {
                TapeEntry::Dense { input } => input.as_ref().map_or(0, Tensor::len),
                TapeEntry::Conv { cols, .. } => cols.as_ref().map_or(0, Vec::len),
                TapeEntry::Relu { mask } => mask.as_ref().map_or(0, Vec::len),
                TapeEntry::Pool { argmax, .. } => argmax.as_ref().map_or(0, Vec::len),
                TapeEntry::BatchNorm { xhat, .. } => xhat.as_ref().map_or(0, Tensor::len),
                TapeEntry::Skipped | TapeEntry::Flatten { .. } => 0,
            })
            .sum()
    }

    /// Hash of every ReLU mask and pooling winner. Two forwards with equal
    /// signatures took the same piecewise-linear branch.
    pub fn activation_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for e in &self.entries {
            match e {
                TapeEntry::Relu { mask: Some(m) } => m.iter().for_each(|&b| feed(b as u64)),
                TapeEntry::Pool { argmax: Some(a), .. } => a.iter().for_each(|&i| feed(i as u64)),
                _ => {}
            }
        }
        h
    }
}

/// Gradients for the gated-on parameter classes only.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    weights: Vec<Option<Tensor<T>>>,
    biases: Vec<Option<Tensor<T>>>,
    trace: Vec<KernelCall>,
}

impl<T: Scalar> Gradients<T> {
    fn empty(layers: usize) -> Self {
        Gradients {
            weights: vec![None; layers],
            biases: vec![None; layers],
            trace: Vec::new(),
        }
    }

    pub fn get(&self, layer: usize, class: ParamClass) -> Option<&Tensor<T>> {
        match class {
            ParamClass::Weights => self.weights.get(layer)?.as_ref(),
            ParamClass::Biases => self.biases.get(layer)?.as_ref(),
        }
    }

    pub fn get_mut(&mut self, layer: usize, class: ParamClass) -> Option<&mut Tensor<T>> {
        match class {
            ParamClass::Weights => self.weights.get_mut(layer)?.as_mut(),
            ParamClass::Biases => self.biases.get_mut(layer)?.as_mut(),
        }
    }

    /// `(layer, class, gradient)` in layer order, weights before biases.
    pub fn entries(&self) -> impl Iterator<Item = (usize, ParamClass, &Tensor<T>)> {
        self.weights
            .iter()
            .zip(&self.biases)
            .enumerate()
            .flat_map(|(i, (w, b))| {
                w.iter()
                    .map(move |t| (i, ParamClass::Weights, t))
                    .chain(b.iter().map(move |t| (i, ParamClass::Biases, t)))
            })
    }

    pub fn len(&self) -> usize {
        self.entries().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Kernels in the order they ran.
    pub fn trace(&self) -> &[KernelCall] {
        &self.trace
    }

    pub fn count_kernels(&self, kind: KernelKind) -> usize {
        self.trace.iter().filter(|c| c.kind == kind).count()
    }
}

/// Kernels a layer runs under a plan.
#[derive(Debug, Clone, Copy, Default)]
struct LayerWork {
    weight: bool,
    bias: bool,
    input: bool,
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes a network for the per-sample `input_shape`
    /// (`[C, H, W]` for images, `[D]` for flat features).
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], init_seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Build {
                layer: 0,
                kind: "network",
                reason: "at least one layer is required".into(),
            });
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Build {
                layer: 0,
                kind: "network",
                reason: format!("invalid input shape {input_shape:?}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut shapes = vec![input_shape.to_vec()];
        for (i, spec) in specs.iter().enumerate() {
            let (layer, out) = Layer::build(i, spec, shapes.last().unwrap(), &mut rng)?;
            layers.push(layer);
            shapes.push(out);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 {
            return Err(Error::Build {
                layer: specs.len() - 1,
                kind: specs.last().unwrap().kind_name(),
                reason: format!("network must end in a class-logit vector, got {out:?}"),
            });
        }
        Ok(Network { layers, shapes })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut Layer<T>> {
        self.layers.get_mut(index)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Per-layer flag: does the layer own parameters (counts toward kL depth)?
    pub fn parametric_layout(&self) -> Vec<bool> {
        self.layers.iter().map(Layer::is_parametric).collect()
    }

    pub fn parametric_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_parametric()).count()
    }

    pub fn normal_plan(&self) -> GatePlan {
        GatePlan::normal(&self.parametric_layout())
    }

    pub fn param(&self, layer: usize, class: ParamClass) -> Option<&Tensor<T>> {
        let l = self.layers.get(layer)?;
        match class {
            ParamClass::Weights => l.weights(),
            ParamClass::Biases => l.biases(),
        }
    }

    pub fn param_mut(&mut self, layer: usize, class: ParamClass) -> Option<&mut Tensor<T>> {
        let l = self.layers.get_mut(layer)?;
        match class {
            ParamClass::Weights => l.weights_mut(),
            ParamClass::Biases => l.biases_mut(),
        }
    }

    /// `(layer, class, tensor)` for every learned tensor.
    pub fn params(&self) -> impl Iterator<Item = (usize, ParamClass, &Tensor<T>)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| {
            l.weights()
                .map(|t| (i, ParamClass::Weights, t))
                .into_iter()
                .chain(l.biases().map(|t| (i, ParamClass::Biases, t)))
        })
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::weights).map(Tensor::len).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::biases).map(Tensor::len).sum()
    }

    /// Bias elements of the last `k` parametric layers.
    pub fn bias_count_last_k(&self, k: usize) -> usize {
        self.layers
            .iter()
            .rev()
            .filter_map(Layer::biases)
            .take(k)
            .map(Tensor::len)
            .sum()
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let s = batch.shape();
        if s.len() != self.shapes[0].len() + 1 || s[1..] != self.shapes[0][..] {
            let mut expected = vec![s.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.shapes[0]);
            return Err(Error::dim("network forward", s, &expected));
        }
        Ok(s[0])
    }

    /// Inference-mode forward (batchnorm uses running statistics); no tape.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Dense { weights, biases } => dense_forward(&x, weights, biases)?,
                Layer::Conv2d {
                    weights,
                    biases,
                    stride,
                    padding,
                } => conv2d_forward(&x, weights, biases, *stride, *padding)?.0,
                Layer::Relu => tensor::relu(&x),
                Layer::MaxPool2d { window, stride } => maxpool2d(&x, *window, *stride)?.0,
                Layer::BatchNorm2d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => batchnorm2d_eval(
                    &x,
                    gamma.data(),
                    beta.data(),
                    running_mean.data(),
                    running_var.data(),
                    T::from_f64_lossy(BN_EPS),
                )?,
                Layer::Flatten => flatten(x)?,
            };
        }
        Ok(x)
    }

    /// Forward pass retaining everything any plan could need.
    pub fn forward(&mut self, batch: &Tensor<T>, training: bool) -> Result<(Tensor<T>, Tape<T>)> {
        self.forward_inner(batch, training, None)
    }

    /// Forward pass retaining only what backward under `plan` will read.
    pub fn forward_for_plan(
        &mut self,
        batch: &Tensor<T>,
        training: bool,
        plan: &GatePlan,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        plan.validate(&self.parametric_layout())?;
        self.forward_inner(batch, training, Some(plan))
    }

    fn forward_inner(
        &mut self,
        batch: &Tensor<T>,
        training: bool,
        plan: Option<&GatePlan>,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        let n = self.check_batch(batch)?;
        let work: Vec<LayerWork> = match plan {
            Some(p) => (0..self.layers.len()).map(|i| self.work(p, i)).collect(),
            None => vec![
                LayerWork {
                    weight: true,
                    bias: true,
                    input: true,
                };
                self.layers.len()
            ],
        };
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (layer, w) in self.layers.iter_mut().zip(&work) {
            let (y, entry) = match layer {
                Layer::Dense { weights, biases } => {
                    let y = dense_forward(&x, weights, biases)?;
                    (y, TapeEntry::Dense {
                        input: w.weight.then_some(x),
                    })
                }
                Layer::Conv2d {
                    weights,
                    biases,
                    stride,
                    padding,
                } => {
                    let (y, geometry, cols) = conv2d_forward(&x, weights, biases, *stride, *padding)?;
                    (y, TapeEntry::Conv {
                        geometry,
                        cols: w.weight.then_some(cols),
                    })
                }
                Layer::Relu => {
                    let y = tensor::relu(&x);
                    let mask = w
                        .input
                        .then(|| y.data().iter().map(|&v| v > T::zero()).collect());
                    (y, TapeEntry::Relu { mask })
                }
                Layer::MaxPool2d { window, stride } => {
                    let input_shape = x.shape().to_vec();
                    let (y, argmax) = maxpool2d(&x, *window, *stride)?;
                    (y, TapeEntry::Pool {
                        argmax: w.input.then_some(argmax),
                        input_shape,
                    })
                }
                Layer::BatchNorm2d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let eps = T::from_f64_lossy(BN_EPS);
                    let keep_xhat = w.weight || w.input;
                    if training {
                        let (y, stats) = batchnorm2d_train(&x, gamma.data(), beta.data(), eps)?;
                        update_running(running_mean, running_var, &stats, x.len() / x.shape()[1]);
                        (y, TapeEntry::BatchNorm {
                            xhat: keep_xhat.then_some(stats.xhat),
                            inv_std: stats.inv_std,
                            training: true,
                        })
                    } else {
                        let y = batchnorm2d_eval(
                            &x,
                            gamma.data(),
                            beta.data(),
                            running_mean.data(),
                            running_var.data(),
                            eps,
                        )?;
                        let inv_std: Vec<T> = running_var
                            .data()
                            .iter()
                            .map(|&v| T::one() / (v + eps).sqrt())
                            .collect();
                        let xhat = keep_xhat
                            .then(|| {
                                let zero = vec![T::zero(); inv_std.len()];
                                batchnorm2d_eval(&x, &vec![T::one(); inv_std.len()], &zero, running_mean.data(), running_var.data(), eps)
                            })
                            .transpose()?;
                        (y, TapeEntry::BatchNorm {
                            xhat,
                            inv_std,
                            training: false,
                        })
                    }
                }
                Layer::Flatten => {
                    let input_shape = x.shape().to_vec();
                    (flatten(x)?, TapeEntry::Flatten { input_shape })
                }
            };
            entries.push(entry);
            x = y;
        }
        if let Some(p) = plan {
            for (e, _) in entries.iter_mut().zip(0..p.truncation_index()) {
                *e = TapeEntry::Skipped;
            }
        }
        Ok((x, Tape { batch: n, entries }))
    }

    fn work(&self, plan: &GatePlan, i: usize) -> LayerWork {
        let t = plan.truncation_index();
        if i < t {
            return LayerWork::default();
        }
        let gate = plan.gate(i);
        LayerWork {
            weight: gate.grad_weights,
            bias: gate.grad_biases,
            input: i > t,
        }
    }

    /// Backpropagates `grad_logits` under `plan`, stopping at its truncation index.
    pub fn backward(&self, tape: &Tape<T>, grad_logits: &Tensor<T>, plan: &GatePlan) -> Result<Gradients<T>> {
        plan.validate(&self.parametric_layout())?;
        if tape.entries.len() != self.layers.len() {
            return Err(Error::Contract("tape was recorded on a different network".into()));
        }
        let expected = [tape.batch, self.classes()];
        if grad_logits.shape() != expected {
            return Err(Error::dim("backward", grad_logits.shape(), &expected));
        }
        let mut grads = Gradients::empty(self.layers.len());
        let t = plan.truncation_index();
        let missing = |i: usize, what: &str| {
            Error::Contract(format!(
                "tape entry for layer {i} lacks {what}; it was recorded for a narrower plan"
            ))
        };
        let mut dy = grad_logits.clone();
        for i in (t..self.layers.len()).rev() {
            let w = self.work(plan, i);
            let mut record = |kind| grads.trace.push(KernelCall { layer: i, kind });
            let next = match (&self.layers[i], &tape.entries[i]) {
                (Layer::Dense { weights, .. }, TapeEntry::Dense { input }) => {
                    if w.bias {
                        record(KernelKind::BiasGrad);
                        grads.biases[i] = Some(sum_rows(&dy)?);
                    }
                    if w.weight {
                        record(KernelKind::WeightGrad);
                        let x = input.as_ref().ok_or_else(|| missing(i, "the layer input"))?;
                        grads.weights[i] = Some(matmul_tn(&dy, x)?);
                    }
                    if w.input {
                        record(KernelKind::InputGrad);
                        Some(matmul(&dy, weights)?)
                    } else {
                        None
                    }
                }
                (Layer::Conv2d { weights, .. }, TapeEntry::Conv { geometry, cols }) => {
                    if w.bias {
                        record(KernelKind::BiasGrad);
                        grads.biases[i] = Some(conv2d_grad_bias(&dy)?);
                    }
                    if w.weight {
                        record(KernelKind::WeightGrad);
                        let cols = cols.as_ref().ok_or_else(|| missing(i, "the column buffer"))?;
                        grads.weights[i] = Some(conv2d_grad_kernels(cols, &dy, geometry)?);
                    }
                    if w.input {
                        record(KernelKind::InputGrad);
                        Some(conv2d_grad_input(weights, &dy, geometry)?)
                    } else {
                        None
                    }
                }
                (Layer::Relu, TapeEntry::Relu { mask }) => {
                    record(KernelKind::InputGrad);
                    let mask = mask.as_ref().ok_or_else(|| missing(i, "the activation mask"))?;
                    Some(tensor::relu_backward(mask, &dy)?)
                }
                (Layer::MaxPool2d { .. }, TapeEntry::Pool { argmax, input_shape }) => {
                    record(KernelKind::InputGrad);
                    let argmax = argmax.as_ref().ok_or_else(|| missing(i, "the pooling winners"))?;
                    Some(maxpool2d_backward(&dy, argmax, input_shape)?)
                }
                (
                    Layer::BatchNorm2d { gamma, .. },
                    TapeEntry::BatchNorm {
                        xhat,
                        inv_std,
                        training,
                    },
                ) => {
                    if w.bias {
                        record(KernelKind::BiasGrad);
                        grads.biases[i] = Some(batchnorm2d_grad_beta(&dy)?);
                    }
                    if w.weight {
                        record(KernelKind::WeightGrad);
                        let xhat = xhat.as_ref().ok_or_else(|| missing(i, "normalized input"))?;
                        grads.weights[i] = Some(batchnorm2d_grad_gamma(&dy, xhat)?);
                    }
                    if w.input {
                        record(KernelKind::InputGrad);
                        if *training {
                            let xhat = xhat.as_ref().ok_or_else(|| missing(i, "normalized input"))?;
                            Some(batchnorm2d_grad_input(&dy, xhat, gamma.data(), inv_std)?)
                        } else {
                            Some(scale_channels(&dy, gamma.data(), inv_std)?)
                        }
                    } else {
                        None
                    }
                }
                (Layer::Flatten, TapeEntry::Flatten { input_shape }) => {
                    record(KernelKind::InputGrad);
                    Some(dy.clone().reshape(input_shape.clone())?)
                }
                (_, TapeEntry::Skipped) => return Err(missing(i, "any retained state")),
                (layer, _) => {
                    return Err(Error::Contract(format!(
                        "tape entry for layer {i} does not match a {} layer",
                        layer.kind_name()
                    )))
                }
            };
            match next {
                Some(d) => dy = d,
                None => break,
            }
        }
        Ok(grads)
    }

    /// Analytic multiply-accumulate count of [`Network::backward`] under `plan`
    /// for a batch of `batch` samples. Elementwise kernels count one op per
    /// element touched; batchnorm input gradients count three.
    pub fn backward_flops(&self, plan: &GatePlan, batch: usize) -> u64 {
        let mut total: u64 = 0;
        let t = plan.truncation_index();
        for i in t..self.layers.len() {
            let w = self.work(plan, i);
            let in_len: u64 = self.shapes[i].iter().product::<usize>() as u64;
            let out_len: u64 = self.shapes[i + 1].iter().product::<usize>() as u64;
            let n = batch as u64;
            total += match &self.layers[i] {
                Layer::Dense { .. } => {
                    let mac = n * in_len * out_len;
                    w.weight as u64 * mac + w.bias as u64 * n * out_len + w.input as u64 * mac
                }
                Layer::Conv2d { weights, .. } => {
                    let s = weights.shape();
                    let patch = (s[1] * s[2] * s[3]) as u64;
                    let mac = n * out_len * patch;
                    w.weight as u64 * mac + w.bias as u64 * n * out_len + w.input as u64 * mac
                }
                Layer::Relu => w.input as u64 * n * out_len,
                Layer::MaxPool2d { .. } => w.input as u64 * n * out_len,
                Layer::BatchNorm2d { .. } => {
                    let e = n * out_len;
                    w.weight as u64 * e + w.bias as u64 * e + w.input as u64 * 3 * e
                }
                Layer::Flatten => 0,
            };
        }
        total
    }
}

fn dense_forward<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, biases: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul_nt(x, weights)?;
    let out = biases.len();
    for row in y.data_mut().chunks_mut(out) {
        for (v, &b) in row.iter_mut().zip(biases.data()) {
            *v += b;
        }
    }
    Ok(y)
}

fn flatten<T: Scalar>(x: Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let rest = x.len() / n;
    x.reshape(vec![n, rest])
}

fn sum_rows<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = dy.shape()[1];
    let mut out = vec![T::zero(); cols];
    for row in dy.data().chunks(cols) {
        for (acc, &v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Tensor::new(vec![cols], out)
}

fn scale_channels<T: Scalar>(dy: &Tensor<T>, gamma: &[T], inv_std: &[T]) -> Result<Tensor<T>> {
    let &[_, c, h, w] = dy.shape() else {
        return Err(Error::dim("batchnorm2d backward", dy.shape(), &[0, 0, 0, 0]));
    };
    let mut out = dy.clone();
    for (plane, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let k = gamma[plane % c] * inv_std[plane % c];
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    Ok(out)
}

fn update_running<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &tensor::BatchStats<T>,
    count: usize,
) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - m;
    // running variance tracks the unbiased estimate
    let unbias = if count > 1 {
        T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
    } else {
        T::one()
    };
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + m * b * unbias;
    }
}
