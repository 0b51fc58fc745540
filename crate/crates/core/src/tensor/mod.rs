//! Dense row-major tensors and the numerical kernels built on them.

mod conv;
mod linalg;
mod norm;
mod pool;

pub use conv::{
    conv2d, conv2d_forward, conv2d_grad_bias, conv2d_grad_input, conv2d_grad_kernels,
    conv2d_grads, im2col, ConvGeometry,
};
pub use linalg::{matmul, matmul_nt, matmul_tn};
pub use norm::{
    batchnorm2d_eval, batchnorm2d_grad_beta, batchnorm2d_grad_gamma, batchnorm2d_grad_input,
    batchnorm2d_train, BatchStats,
};
pub use pool::{maxpool2d, maxpool2d_backward, PoolGeometry};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "dimensions must be positive, got {shape:?}"
        );
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    /// Builds from f64 values, converting to the element type.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        low: f64,
        high: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        let dist = Uniform::new(low, high).expect("low < high");
        let data = (0..len)
            .map(|_| T::from_f64_lossy(dist.sample(rng)))
            .collect();
        Tensor::new(shape, data).expect("length matches shape")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over element bit patterns and the shape.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for &d in &self.shape {
            feed(d as u64);
        }
        for &v in &self.data {
            feed(v.bits());
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.shape[0] || count == 0 {
            return Err(Error::Shape(format!(
                "outer slice {start}..{} out of range for {:?}",
                start + count,
                self.shape
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..(start + count) * stride].to_vec(),
        })
    }

    /// Stacks the listed outer-axis rows into a new tensor.
    pub fn gather_outer(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::Shape(format!(
                    "row {r} out of range for {:?}",
                    self.shape
                )));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Routes `grad_out` through positions where the forward output was positive.
pub fn relu_backward<T: Scalar>(mask: &[bool], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.len() != grad_out.len() {
        return Err(Error::dim("relu_backward", &[mask.len()], grad_out.shape()));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { T::zero() })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn checksum_tracks_bits() {
        let a = Tensor::<f32>::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.data_mut()[1] = 2.0000002;
        assert_ne!(a.checksum(), b.checksum());
        let c = a.clone().reshape(vec![2, 1]).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn gather_and_slice() {
        let t = Tensor::<f64>::from_f64(vec![3, 2], &[0., 1., 2., 3., 4., 5.]).unwrap();
        let g = t.gather_outer(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4., 5., 0., 1.]);
        let s = t.slice_outer(1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2., 3., 4., 5.]);
        assert!(t.gather_outer(&[3]).is_err());
    }

    #[test]
    fn relu_masks_gradient() {
        let x = Tensor::<f64>::from_f64(vec![4], &[-1.0, 0.0, 2.0, 3.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 3.0]);
        let mask: Vec<bool> = y.data().iter().map(|&v| v > 0.0).collect();
        let g = Tensor::full(vec![4], 1.0);
        assert_eq!(relu_backward(&mask, &g).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_is_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::uniform(vec![10], -1.0, 1.0, &mut r1);
        let b = Tensor::<f64>::uniform(vec![10], -1.0, 1.0, &mut r2);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }
}
