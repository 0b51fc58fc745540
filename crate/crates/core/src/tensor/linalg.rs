use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major matrix operand: `rows x cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + (accumulate ? out : 0)`, `out` row-major `m x n`.
pub(crate) fn gemm_into<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: slice lengths were checked against the logical shapes above,
    // and `out` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn as_matrix<'a, T: Scalar>(t: &'a Tensor<T>, op: &'static str) -> Result<MatRef<'a, T>> {
    match t.shape() {
        [r, c] => Ok(MatRef::new(t.data(), *r, *c)),
        other => Err(Error::dim(op, other, &[0, 0])),
    }
}

/// `a[M×K] · b[K×N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let am = as_matrix(a, "matmul")?;
    let bm = as_matrix(b, "matmul")?;
    product(am, bm, a.shape(), b.shape(), "matmul")
}

/// `aᵀ · b` for `a[K×M]`, `b[K×N]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let am = as_matrix(a, "matmul_tn")?.t();
    let bm = as_matrix(b, "matmul_tn")?;
    product(am, bm, a.shape(), b.shape(), "matmul_tn")
}

/// `a · bᵀ` for `a[M×K]`, `b[N×K]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let am = as_matrix(a, "matmul_nt")?;
    let bm = as_matrix(b, "matmul_nt")?.t();
    product(am, bm, a.shape(), b.shape(), "matmul_nt")
}

fn product<T: Scalar>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    ashape: &[usize],
    bshape: &[usize],
    op: &'static str,
) -> Result<Tensor<T>> {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    if k != k2 {
        return Err(Error::dim(op, ashape, bshape));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_into(a, b, &mut out, false);
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out).unwrap()
    }

    #[test]
    fn identity_left_operand() {
        let a = Tensor::<f64>::from_f64(vec![2, 2], &[1., 0., 0., 1.]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![2, 2], &[3., 4., 5., 6.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3., 4., 5., 6.]);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f64>::from_f64(vec![1, 2], &[1., 2.]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![2, 1], &[3., 4.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::uniform(vec![7, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![5, 3], -1.0, 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert!(c.max_abs_diff(&naive(&a, &b)) < 1e-12);
    }

    #[test]
    fn transposed_variants_match_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::uniform(vec![6, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![6, 3], -1.0, 1.0, &mut rng);
        let tn = matmul_tn(&a, &b).unwrap();
        assert!(tn.max_abs_diff(&naive(&transpose(&a), &b)) < 1e-12);
        let c = Tensor::<f64>::uniform(vec![5, 4], -1.0, 1.0, &mut rng);
        let nt = matmul_nt(&a, &c).unwrap();
        assert!(nt.max_abs_diff(&naive(&a, &transpose(&c))) < 1e-12);
    }

    #[test]
    fn mismatch_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        match matmul(&a, &b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
        assert!(matmul(&Tensor::<f64>::zeros(vec![3]), &b).is_err());
    }

    #[test]
    fn identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f32>::uniform(vec![4, 6], -3.0, 3.0, &mut rng);
        assert_eq!(matmul(&a, &Tensor::identity(6)).unwrap(), a);
        assert_eq!(matmul(&Tensor::identity(4), &a).unwrap(), a);
    }
}
