//! 2-D cross-correlation via im2col + GEMM.
//!
//! The column buffer is laid out per sample as `[N][C·Kh·Kw][H'·W']`, so each
//! sample's output block `[F][H'·W']` is a single GEMM written in place and
//! the kernel gradient is a fixed-order sum of per-sample GEMMs.

use super::linalg::{gemm_into, MatRef};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (input, kernels) else {
            return Err(Error::dim("conv2d", input, kernels));
        };
        if kc != c {
            return Err(Error::dim("conv2d", input, kernels));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        let out_h = out_extent(h, kh, stride, padding, "height")?;
        let out_w = out_extent(w, kw, stride, padding, "width")?;
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            filters: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_h, self.out_w]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.filters, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Rows of one sample's column matrix (`C·Kh·Kw`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output positions per sample and filter.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }
}

fn out_extent(size: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!(
            "kernel {axis} {k} exceeds padded input {padded}"
        )));
    }
    // floor: trailing rows/columns a stride cannot reach are ignored
    Ok((padded - k) / stride + 1)
}

/// Unrolls every sample's receptive fields into the column buffer.
pub fn im2col<T: Scalar>(input: &Tensor<T>, g: &ConvGeometry) -> Vec<T> {
    let per_sample = g.patch_len() * g.positions();
    let mut cols = vec![T::zero(); g.batch * per_sample];
    let x = input.data();
    let plane = g.in_h * g.in_w;
    for n in 0..g.batch {
        let block = &mut cols[n * per_sample..(n + 1) * per_sample];
        for c in 0..g.in_channels {
            let src = &x[(n * g.in_channels + c) * plane..][..plane];
            for ki in 0..g.kernel_h {
                for kj in 0..g.kernel_w {
                    let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                    let dst = &mut block[row * g.positions()..][..g.positions()];
                    fill_row(dst, src, g, ki, kj);
                }
            }
        }
    }
    cols
}

#[inline]
fn fill_row<T: Scalar>(dst: &mut [T], src: &[T], g: &ConvGeometry, ki: usize, kj: usize) {
    let (p, s) = (g.padding as isize, g.stride as isize);
    for oy in 0..g.out_h {
        let iy = oy as isize * s + ki as isize - p;
        let out_row = &mut dst[oy * g.out_w..][..g.out_w];
        if iy < 0 || iy >= g.in_h as isize {
            out_row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let src_row = &src[iy as usize * g.in_w..][..g.in_w];
        for (ox, v) in out_row.iter_mut().enumerate() {
            let ix = ox as isize * s + kj as isize - p;
            *v = if ix < 0 || ix >= g.in_w as isize {
                T::zero()
            } else {
                src_row[ix as usize]
            };
        }
    }
}

/// Scatter-adds column gradients back onto the input image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let per_sample = g.patch_len() * g.positions();
    let plane = g.in_h * g.in_w;
    let mut img = vec![T::zero(); g.batch * g.in_channels * plane];
    let (p, s) = (g.padding as isize, g.stride as isize);
    for n in 0..g.batch {
        let block = &cols[n * per_sample..(n + 1) * per_sample];
        for c in 0..g.in_channels {
            let dst = &mut img[(n * g.in_channels + c) * plane..][..plane];
            for ki in 0..g.kernel_h {
                for kj in 0..g.kernel_w {
                    let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                    let src = &block[row * g.positions()..][..g.positions()];
                    for oy in 0..g.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..g.out_w {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < g.in_w as isize {
                                drow[ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

/// Forward pass that also hands back the column buffer for reuse in backward.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, ConvGeometry, Vec<T>)> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, padding)?;
    if bias.shape() != [g.filters] {
        return Err(Error::dim("conv2d bias", bias.shape(), &[g.filters]));
    }
    let cols = im2col(input, &g);
    let (pl, pos) = (g.patch_len(), g.positions());
    let mut out = vec![T::zero(); g.batch * g.filters * pos];
    let w = MatRef::new(kernels.data(), g.filters, pl);
    for n in 0..g.batch {
        let dst = &mut out[n * g.filters * pos..][..g.filters * pos];
        for (f, &b) in bias.data().iter().enumerate() {
            dst[f * pos..(f + 1) * pos].iter_mut().for_each(|v| *v = b);
        }
        let cn = MatRef::new(&cols[n * pl * pos..][..pl * pos], pl, pos);
        gemm_into(w, cn, dst, true);
    }
    Ok((Tensor::new(g.output_shape().to_vec(), out)?, g, cols))
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_forward(input, kernels, bias, stride, padding).map(|(out, _, _)| out)
}

fn check_grad_out<T: Scalar>(g: &ConvGeometry, grad_out: &Tensor<T>) -> Result<ConvGeometry> {
    let s = grad_out.shape();
    if s.len() != 4 || s[1] != g.filters || s[2] != g.out_h || s[3] != g.out_w {
        return Err(Error::dim("conv2d backward", s, &g.output_shape()));
    }
    Ok(g.with_batch(s[0]))
}

/// Σ over batch and spatial positions of `grad_out[·][f][·][·]`.
pub fn conv2d_grad_bias<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, f, h, w] = grad_out.shape() else {
        return Err(Error::dim("conv2d_grad_bias", grad_out.shape(), &[0, 0, 0, 0]));
    };
    let pos = h * w;
    let mut gb = vec![T::zero(); f];
    let d = grad_out.data();
    for s in 0..n {
        for (fi, acc) in gb.iter_mut().enumerate() {
            for &v in &d[(s * f + fi) * pos..][..pos] {
                *acc += v;
            }
        }
    }
    Tensor::new(vec![f], gb)
}

/// Kernel gradient from the forward column buffer: Σₙ dOutₙ · colsₙᵀ.
pub fn conv2d_grad_kernels<T: Scalar>(
    cols: &[T],
    grad_out: &Tensor<T>,
    geometry: &ConvGeometry,
) -> Result<Tensor<T>> {
    let g = check_grad_out(geometry, grad_out)?;
    let (pl, pos) = (g.patch_len(), g.positions());
    if cols.len() != g.batch * pl * pos {
        return Err(Error::dim(
            "conv2d_grad_kernels",
            &[cols.len()],
            &[g.batch * pl * pos],
        ));
    }
    let mut gk = vec![T::zero(); g.filters * pl];
    for n in 0..g.batch {
        let dout = MatRef::new(&grad_out.data()[n * g.filters * pos..][..g.filters * pos], g.filters, pos);
        let cn = MatRef::new(&cols[n * pl * pos..][..pl * pos], pl, pos);
        gemm_into(dout, cn.t(), &mut gk, n > 0);
    }
    Tensor::new(g.kernel_shape().to_vec(), gk)
}

/// Input gradient: col2im(Wᵀ · dOutₙ) per sample.
pub fn conv2d_grad_input<T: Scalar>(
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    geometry: &ConvGeometry,
) -> Result<Tensor<T>> {
    let g = check_grad_out(geometry, grad_out)?;
    if kernels.shape() != g.kernel_shape() {
        return Err(Error::dim("conv2d_grad_input", kernels.shape(), &g.kernel_shape()));
    }
    let (pl, pos) = (g.patch_len(), g.positions());
    let w = MatRef::new(kernels.data(), g.filters, pl);
    let mut dcols = vec![T::zero(); g.batch * pl * pos];
    for n in 0..g.batch {
        let dout = MatRef::new(&grad_out.data()[n * g.filters * pos..][..g.filters * pos], g.filters, pos);
        gemm_into(w.t(), dout, &mut dcols[n * pl * pos..][..pl * pos], false);
    }
    Tensor::new(g.input_shape().to_vec(), col2im(&dcols, &g))
}

/// All three adjoints of [`conv2d`].
pub fn conv2d_grads<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::dim("conv2d_grads", grad_out.shape(), &g.output_shape()));
    }
    let cols = im2col(input, &g);
    Ok((
        conv2d_grad_input(kernels, grad_out, &g)?,
        conv2d_grad_kernels(&cols, grad_out, &g)?,
        conv2d_grad_bias(grad_out)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
        let [f, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[fi];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((fi * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, f, oh, ow], out).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let k = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(vec![1]);
        assert_eq!(conv2d(&x, &k, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn bias_broadcasts_over_zero_input() {
        let x = Tensor::<f64>::zeros(vec![2, 3, 4, 4]);
        let k = Tensor::full(vec![1, 3, 3, 3], 0.7);
        let b = Tensor::full(vec![1], 2.5);
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::uniform(vec![2, 3, 8, 8], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(vec![4, 3, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![4], -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        assert!(y.max_abs_diff(&naive_conv(&x, &k, &b, 2, 1)) < 1e-10);
    }

    #[test]
    fn rejects_impossible_geometry() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 6, 6]);
        let b = Tensor::zeros(vec![1]);
        let big = Tensor::zeros(vec![1, 1, 9, 9]);
        assert!(matches!(conv2d(&x, &big, &b, 1, 1), Err(Error::Shape(_))));
        let wrong_c = Tensor::zeros(vec![1, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &wrong_c, &b, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(vec![1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(vec![3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let dy = Tensor::zeros(vec![1, 3, 5, 5]);
        let (gi, gk, gb) = conv2d_grads(&x, &k, &dy, 1, 1).unwrap();
        for t in [&gi, &gk, &gb] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bias_gradient_sums_ones() {
        let dy = Tensor::<f64>::full(vec![1, 2, 4, 4], 1.0);
        assert_eq!(conv2d_grad_bias(&dy).unwrap().data(), &[16.0, 16.0]);
    }

    #[test]
    fn grad_shape_mismatch_is_dimension_error() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 5, 5]);
        let k = Tensor::<f64>::zeros(vec![3, 2, 3, 3]);
        let dy = Tensor::zeros(vec![1, 3, 4, 4]);
        assert!(matches!(conv2d_grads(&x, &k, &dy, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn im2col_round_trip_counts_overlaps() {
        // col2im(im2col(ones)) counts how many windows cover each pixel.
        let x = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
        let g = ConvGeometry::new(x.shape(), &[1, 1, 2, 2], 1, 0).unwrap();
        let back = col2im(&im2col(&x, &g), &g);
        assert_eq!(back, vec![1., 2., 1., 2., 4., 2., 1., 2., 1.]);
    }
}
