use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    /// Floor semantics: trailing rows/columns that do not fill a window are dropped.
    pub fn new(in_h: usize, in_w: usize, window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::Shape("pool window and stride must be positive".into()));
        }
        if window > in_h || window > in_w {
            return Err(Error::Shape(format!(
                "pool window {window} larger than input {in_h}x{in_w}"
            )));
        }
        Ok(PoolGeometry {
            window,
            stride,
            out_h: (in_h - window) / stride + 1,
            out_w: (in_w - window) / stride + 1,
        })
    }
}

/// Max pooling over `N×C×H×W`. Returns the output and, per output element,
/// the linear input index of its winner (ties go to the lowest index).
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::dim("maxpool2d", input.shape(), &[0, 0, 0, 0]));
    };
    let g = PoolGeometry::new(h, w, window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * g.out_h * g.out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for idx in row..row + window {
                        // strict comparison keeps the earliest (lowest) index on ties
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, g.out_h, g.out_w], out)?, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::dim("maxpool2d_backward", grad_out.shape(), &[argmax.len()]));
    }
    let mut gi = Tensor::zeros(input_shape.to_vec());
    let dst = gi.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        let slot = dst.get_mut(idx).ok_or_else(|| {
            Error::Contract(format!("pool argmax {idx} outside input {input_shape:?}"))
        })?;
        *slot += g;
    }
    Ok(gi)
}
