//! Per-channel batch normalization kernels over `N×C×H×W`.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch statistics produced by a training-mode forward.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Normalized input, kept for backward.
    pub xhat: Tensor<T>,
}

fn dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h * w)),
        other => Err(Error::dim("batchnorm2d", other, &[0, 0, 0, 0])),
    }
}

fn check_channels<T: Scalar>(c: usize, params: &[&[T]]) -> Result<()> {
    for p in params {
        if p.len() != c {
            return Err(Error::dim("batchnorm2d channels", &[p.len()], &[c]));
        }
    }
    Ok(())
}

pub fn batchnorm2d_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (n, c, hw) = dims(x.shape())?;
    check_channels(c, &[gamma, beta])?;
    let count = T::from_usize(n * hw).unwrap();
    let d = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            for &v in &d[(ni * c + ci) * hw..][..hw] {
                s += v;
            }
        }
        let m = s / count;
        let mut sq = T::zero();
        for ni in 0..n {
            for &v in &d[(ni * c + ci) * hw..][..hw] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ci] = m;
        var[ci] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); d.len()];
    let mut y = vec![T::zero(); d.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for i in off..off + hw {
                let z = (d[i] - mean[ci]) * inv_std[ci];
                xhat[i] = z;
                y[i] = gamma[ci] * z + beta[ci];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BatchStats {
            mean,
            var,
            inv_std,
            xhat: Tensor::new(shape, xhat)?,
        },
    ))
}

pub fn batchnorm2d_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, hw) = dims(x.shape())?;
    check_channels(c, &[gamma, beta, mean, var])?;
    let mut y = x.clone();
    let d = y.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let scale = gamma[ci] / (var[ci] + eps).sqrt();
            let off = (ni * c + ci) * hw;
            for v in &mut d[off..off + hw] {
                *v = (*v - mean[ci]) * scale + beta[ci];
            }
        }
    }
    Ok(y)
}

fn channel_sums<T: Scalar>(dy: &Tensor<T>, weight: Option<&Tensor<T>>) -> Result<Vec<T>> {
    let (n, c, hw) = dims(dy.shape())?;
    if let Some(w) = weight {
        if w.shape() != dy.shape() {
            return Err(Error::dim("batchnorm2d backward", w.shape(), dy.shape()));
        }
    }
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, acc) in out.iter_mut().enumerate() {
            let off = (ni * c + ci) * hw;
            match weight {
                Some(w) => {
                    for (g, z) in dy.data()[off..off + hw].iter().zip(&w.data()[off..off + hw]) {
                        *acc += *g * *z;
                    }
                }
                None => {
                    for &g in &dy.data()[off..off + hw] {
                        *acc += g;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Shift gradient: Σ dy per channel.
pub fn batchnorm2d_grad_beta<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let sums = channel_sums(dy, None)?;
    Tensor::new(vec![sums.len()], sums)
}

/// Scale gradient: Σ dy·x̂ per channel.
pub fn batchnorm2d_grad_gamma<T: Scalar>(dy: &Tensor<T>, xhat: &Tensor<T>) -> Result<Tensor<T>> {
    let sums = channel_sums(dy, Some(xhat))?;
    Tensor::new(vec![sums.len()], sums)
}

/// dx = γ·σ⁻¹/m · (m·dy − Σdy − x̂·Σ(dy·x̂)), batch statistics treated as functions of x.
pub fn batchnorm2d_grad_input<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &[T],
    inv_std: &[T],
) -> Result<Tensor<T>> {
    let (n, c, hw) = dims(dy.shape())?;
    check_channels(c, &[gamma, inv_std])?;
    let sum_dy = channel_sums(dy, None)?;
    let sum_dy_xhat = channel_sums(dy, Some(xhat))?;
    let m = T::from_usize(n * hw).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    for ni in 0..n {
        for ci in 0..c {
            let k = gamma[ci] * inv_std[ci] / m;
            let off = (ni * c + ci) * hw;
            for i in off..off + hw {
                dx[i] = k * (m * dy.data()[i] - sum_dy[ci] - xhat.data()[i] * sum_dy_xhat[ci]);
            }
        }
    }
    Tensor::new(dy.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalized_output_has_zero_mean_unit_var() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform(vec![4, 2, 3, 3], -2.0, 5.0, &mut rng);
        let (y, stats) = batchnorm2d_train(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 2 + c) * 9..][..9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-10);
        }
        assert_eq!(stats.mean.len(), 2);
    }

    #[test]
    fn eval_uses_given_statistics() {
        let x = Tensor::<f64>::full(vec![1, 1, 1, 2], 3.0);
        let y = batchnorm2d_eval(&x, &[2.0], &[1.0], &[1.0], &[4.0], 0.0).unwrap();
        // (3 - 1) / 2 * 2 + 1
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn channel_count_checked() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 2, 2]);
        assert!(batchnorm2d_train(&x, &[1.0; 2], &[0.0; 3], 1e-5).is_err());
    }
}
