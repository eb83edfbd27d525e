use crate::error::{Error, Result};
use crate::qtensor::{quantize_slice, QTensor};
use crate::scalar::Scalar;
use crate::tensor::RealTensor;

fn rows<T: Scalar>(t: &RealTensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, c] if n > 0 && c > 0 => Ok((n, c)),
        s => Err(Error::Shape(format!("{what} must be batch x classes, got {s:?}"))),
    }
}

/// One-hot targets, `labels.len() x num_classes`.
pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Result<RealTensor<T>> {
    let mut values = vec![T::zero(); labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        values[i * num_classes + l] = T::one();
    }
    RealTensor::new(vec![labels.len(), num_classes], values)
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(s: &RealTensor<T>) -> Result<RealTensor<T>> {
    let (_, c) = rows(s, "logits")?;
    let mut out = Vec::with_capacity(s.len());
    for row in s.values().chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Ok(RealTensor::from_parts(s.shape().to_vec(), out))
}

fn target_index<T: Scalar>(row: &[T]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in row.iter().enumerate() {
        if v == T::one() && hot.is_none() {
            hot = Some(i);
        } else if v != T::zero() {
            return None;
        }
    }
    hot
}

/// Batch-mean cross-entropy `-sum t log y` and the softmax output `y`.
/// The loss is computed as `logsumexp(s) - s_target`, finite for any finite `s`.
pub fn softmax_xent_forward<T: Scalar>(s: &RealTensor<T>, t: &RealTensor<T>) -> Result<(T, RealTensor<T>)> {
    let (n, c) = rows(s, "logits")?;
    if t.shape() != s.shape() {
        return Err(Error::Shape(format!("targets {:?} vs logits {:?}", t.shape(), s.shape())));
    }
    let mut loss = T::zero();
    for (row, trow) in s.values().chunks(c).zip(t.values().chunks(c)) {
        let target = target_index(trow).ok_or_else(|| Error::Invalid("target row is not one-hot".into()))?;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[target];
    }
    Ok((loss / T::from_usize(n).unwrap(), softmax(s)?))
}

/// [`softmax_xent_forward`] on a quantized logit tensor, in f64.
pub fn softmax_xent_forward_q(s: &QTensor, t: &RealTensor<f64>) -> Result<(f64, RealTensor<f64>)> {
    softmax_xent_forward(&s.dequantize::<f64>(), t)
}

/// Real gradient of the batch-mean loss with respect to the logits,
/// `(y - t) / batch`.
pub fn softmax_xent_grad<T: Scalar>(y: &RealTensor<T>, t: &RealTensor<T>) -> Result<RealTensor<T>> {
    let (n, _) = rows(y, "probabilities")?;
    if t.shape() != y.shape() {
        return Err(Error::Shape(format!("targets {:?} vs probabilities {:?}", t.shape(), y.shape())));
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    let g = y.values().iter().zip(t.values()).map(|(&y, &t)| (y - t) * inv).collect();
    Ok(RealTensor::from_parts(y.shape().to_vec(), g))
}

/// `(y - t) / batch`, quantized with a dynamic exponent at `gradient_bits`.
pub fn softmax_xent_backward<T: Scalar>(y: &RealTensor<T>, t: &RealTensor<T>, gradient_bits: u32) -> Result<QTensor> {
    let g = softmax_xent_grad(y, t)?;
    quantize_slice(g.shape().to_vec(), g.values(), gradient_bits)
}

/// Share of non-target components of a quantized logit gradient that are
/// exactly zero.
pub fn zeroed_fraction(grad: &QTensor, labels: &[usize]) -> Result<f64> {
    let &[n, c] = grad.shape() else {
        return Err(Error::Shape(format!("gradient must be batch x classes, got {:?}", grad.shape())));
    };
    if labels.len() != n || c < 2 {
        return Err(Error::Shape(format!("{} labels for gradient {:?}", labels.len(), grad.shape())));
    }
    let mut zeros = 0usize;
    for (row, &l) in grad.codes().chunks(c).zip(labels) {
        zeros += row.iter().enumerate().filter(|&(i, &code)| i != l && code == 0).count();
    }
    Ok(zeros as f64 / (n * (c - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::FixedPointFormat;
    use proptest::prelude::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> RealTensor<f64> {
        RealTensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let (loss, y) = softmax_xent_forward(&t2(1, 2, &[0.0, 0.0]), &t2(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(y.values(), &[0.5, 0.5]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        let (loss, y) = softmax_xent_forward(&t2(1, 2, &[3f64.ln(), 0.0]), &t2(1, 2, &[1.0, 0.0])).unwrap();
        assert!((y.values()[0] - 0.75).abs() < 1e-15 && (y.values()[1] - 0.25).abs() < 1e-15);
        assert!((loss - (4.0f64 / 3.0).ln()).abs() < 1e-15);

        let s = RealTensor::<f32>::zeros(vec![1, 1000]);
        let t = one_hot::<f32>(&[7], 1000).unwrap();
        let (_, y) = softmax_xent_forward(&s, &t).unwrap();
        assert!(y.values().iter().all(|&v| (v - 0.001).abs() < 1e-7));
    }

    #[test]
    fn forward_rejects_bad_targets() {
        let s = t2(1, 3, &[0.0; 3]);
        assert!(softmax_xent_forward(&s, &t2(1, 3, &[1.0, 1.0, 0.0])).is_err());
        assert!(softmax_xent_forward(&s, &t2(1, 3, &[0.5, 0.5, 0.0])).is_err());
        assert!(softmax_xent_forward(&s, &t2(1, 3, &[0.0; 3])).is_err());
        assert!(softmax_xent_forward(&s, &t2(1, 2, &[1.0, 0.0])).is_err());
        assert!(one_hot::<f64>(&[3], 3).is_err());
    }

    #[test]
    fn quantized_forward_uses_dequantized_logits() {
        let s = QTensor::new(vec![1, 2], vec![0, 0], FixedPointFormat::new(8, -3).unwrap()).unwrap();
        let (loss, _) = softmax_xent_forward_q(&s, &t2(1, 2, &[0.0, 1.0])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn backward_examples() {
        let y = t2(1, 3, &[0.0, 1.0, 0.0]);
        let g = softmax_xent_backward(&y, &y, 8).unwrap();
        assert!(g.codes().iter().all(|&c| c == 0));

        let g = softmax_xent_backward(&t2(1, 2, &[0.5, 0.5]), &t2(1, 2, &[1.0, 0.0]), 8).unwrap();
        assert_eq!(g.dequantize_f64(), vec![-0.5, 0.5]);

        // 1000 classes, uniform prediction, 8 bits: only the target survives.
        let y = RealTensor::new(vec![1, 1000], vec![0.001f64; 1000]).unwrap();
        let t = one_hot::<f64>(&[3], 1000).unwrap();
        let g = softmax_xent_backward(&y, &t, 8).unwrap();
        assert!((g.value(3) + 0.999).abs() <= g.step() / 2.0);
        assert_eq!(zeroed_fraction(&g, &[3]).unwrap(), 1.0);
        let g16 = softmax_xent_backward(&y, &t, 16).unwrap();
        assert_eq!(zeroed_fraction(&g16, &[3]).unwrap(), 0.0);
    }

    /// With uniform y, the non-target components vanish exactly when 1/N_c
    /// falls below half the gradient step.
    #[test]
    fn uniform_prediction_zeroing_threshold() {
        for nc in [10usize, 100, 1000, 10_000] {
            for bits in 4..=16u32 {
                let y = RealTensor::new(vec![1, nc], vec![1.0 / nc as f64; nc]).unwrap();
                let t = one_hot::<f64>(&[0], nc).unwrap();
                let g = softmax_xent_backward(&y, &t, bits).unwrap();
                let zeroed = zeroed_fraction(&g, &[0]).unwrap();
                let below_half = 1.0 / (nc as f64) < g.step() / 2.0;
                let at_half = 1.0 / (nc as f64) == g.step() / 2.0;
                if !at_half {
                    assert_eq!(zeroed == 1.0, below_half, "nc {nc} bits {bits}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized(v in prop::collection::vec(-15.0f64..15.0, 2..40), target in 0usize..40) {
            let c = v.len();
            let s = t2(1, c, &v);
            let t = one_hot::<f64>(&[target % c], c).unwrap();
            let (_, y) = softmax_xent_forward(&s, &t).unwrap();
            let sum: f64 = y.values().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            // Logit gaps up to 30 keep every probability strictly inside (0, 1) in f64.
            prop_assert!(y.values().iter().all(|&p| p > 0.0 && p < 1.0));
            let g = softmax_xent_grad(&y, &t).unwrap();
            let gs: f64 = g.values().iter().sum();
            prop_assert!(gs.abs() <= 1e-9);
        }

        /// Each component's rounding error is at most half a step, so the
        /// quantized gradient's sum is bounded by |class| half-steps.
        #[test]
        fn quantized_gradient_bias_bounded(v in prop::collection::vec(-5.0f64..5.0, 2..200), bits in 2u32..=16) {
            let c = v.len();
            let y = softmax(&t2(1, c, &v)).unwrap();
            let t = one_hot::<f64>(&[0], c).unwrap();
            let g = softmax_xent_backward(&y, &t, bits).unwrap();
            let sum: f64 = g.dequantize_f64().iter().sum();
            prop_assert!(sum.abs() <= c as f64 * g.step() / 2.0 + 1e-12);
        }
    }
}
