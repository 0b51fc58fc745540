use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// d(mean loss)/d(logits).
    pub grad_logits: Tensor<T>,
    /// Samples whose arg-max logit equals the label.
    pub correct: usize,
}

/// Softmax cross-entropy averaged over the batch.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    let &[n, k] = logits.shape() else {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), &[labels.len(), 0]));
    };
    if labels.len() != n {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), &[labels.len(), k]));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grad = vec![T::zero(); n * k];
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        if label >= k {
            return Err(Error::Contract(format!("label {label} outside {k} classes")));
        }
        let (argmax, &max) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |best, (j, v)| if *v > *best.1 { (j, v) } else { best });
        if argmax == label {
            correct += 1;
        }
        let g = &mut grad[i * k..(i + 1) * k];
        let mut denom = T::zero();
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - max).exp();
            denom += *gj;
        }
        loss += (denom.ln() - (row[label] - max)).to_f64_lossy();
        for gj in g.iter_mut() {
            *gj = *gj / denom * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok(LossOutput {
        loss: loss / n as f64,
        grad_logits: Tensor::new(vec![n, k], grad)?,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let logits = Tensor::<f64>::zeros(vec![2, 4]);
        let out = softmax_cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        // each row: 1/4 everywhere, minus 1 at the label, divided by batch 2
        assert!((out.grad_logits.data()[1] + 0.375).abs() < 1e-12);
        assert!((out.grad_logits.data()[0] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Tensor::<f64>::from_f64(vec![1, 3], &[2.0, -1.0, 0.5]).unwrap();
        let out = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(out.grad_logits.data().iter().sum::<f64>().abs() < 1e-12);
        assert_eq!(out.correct, 1);
    }

    #[test]
    fn stable_for_large_logits() {
        let logits = Tensor::<f32>::from_f64(vec![1, 2], &[1000.0, 0.0]).unwrap();
        let out = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(out.loss.is_finite());
        assert!((out.loss - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f64>::zeros(vec![1, 2]);
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }
}
