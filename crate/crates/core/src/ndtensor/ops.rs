use super::{Real, Result, Tensor, TensorError};

pub fn relu<F: Real>(input: &Tensor<F>) -> Tensor<F> {
    input.map(|x| if x > F::zero() { x } else { F::zero() })
}

/// Gradient through a ReLU given its forward *output*.
pub fn relu_backward<F: Real>(output: &Tensor<F>, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
    if output.shape() != grad_out.shape() {
        return Err(TensorError::Shape {
            op: "relu_backward",
            detail: format!("{:?} vs {:?}", output.shape(), grad_out.shape()),
        });
    }
    let data =
        output.data().iter().zip(grad_out.data()).map(|(&y, &g)| if y > F::zero() { g } else { F::zero() }).collect();
    Tensor::from_vec(output.shape(), data)
}

pub fn add<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape { op: "add", detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Numerically stable log-softmax of one row, computed in f64.
pub(crate) fn log_softmax_row<F: Real>(logits: &[F], out: &mut [f64]) {
    let max = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(logits) {
        *o = v.to_f64().unwrap_or(f64::NAN) - max;
        sum += o.exp();
    }
    let log_sum = sum.ln();
    for o in out.iter_mut() {
        *o -= log_sum;
    }
}

/// Softmax along the last axis.
pub fn softmax_over_last<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let width = *input
        .shape()
        .last()
        .ok_or(TensorError::Shape { op: "softmax_over_last", detail: "rank-0 tensor".to_string() })?;
    let mut out = Vec::with_capacity(input.len());
    let mut row = vec![0.0; width];
    for chunk in input.data().chunks(width.max(1)) {
        log_softmax_row(chunk, &mut row);
        out.extend(row.iter().map(|v| F::from_f64_lossy(v.exp())));
    }
    let out = Tensor::from_vec(input.shape(), out)?;
    out.check_finite("softmax_over_last")?;
    Ok(out)
}

/// Weighted categorical cross-entropy over the rows of the last axis.
///
/// Returns `Σ_r w_r · (−log softmax(logits_r)[target_r])` and its gradient with respect to the
/// logits, `w_r · (softmax(logits_r) − onehot(target_r))`. Rows with zero weight contribute
/// nothing.
pub fn cross_entropy_with_logits<F: Real>(
    logits: &Tensor<F>,
    targets: &[usize],
    weights: &[f64],
) -> Result<(f64, Tensor<F>)> {
    let width = *logits.shape().last().unwrap_or(&0);
    let rows = logits.len().checked_div(width).unwrap_or(0);
    if targets.len() != rows || weights.len() != rows || targets.iter().any(|&t| t >= width) {
        return Err(TensorError::Shape {
            op: "cross_entropy_with_logits",
            detail: format!("{rows} rows of width {width}, {} targets, {} weights", targets.len(), weights.len()),
        });
    }
    let mut grad = vec![F::zero(); logits.len()];
    let mut loss = 0.0;
    let mut logp = vec![0.0; width];
    for r in 0..rows {
        let w = weights[r];
        if w == 0.0 {
            continue;
        }
        let span = r * width..(r + 1) * width;
        log_softmax_row(&logits.data()[span.clone()], &mut logp);
        loss -= w * logp[targets[r]];
        for (p, (g, lp)) in grad[span].iter_mut().zip(&logp).enumerate() {
            let onehot = if p == targets[r] { 1.0 } else { 0.0 };
            *g = F::from_f64_lossy(w * (lp.exp() - onehot));
        }
    }
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "cross_entropy_with_logits".to_string() });
    }
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::filled(&[2, 53], 0.7f64);
        let y = softmax_over_last(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 53.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(&[4], vec![-2.0, -0.0, 0.5, 3.0f64]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 3.0]);
        let g = Tensor::from_vec(&[4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&relu(&x), &g).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        assert!(add(&a, &b).is_err());
        assert_eq!(add(&a, &a).unwrap(), a);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.1, 2.0, -1.0, 0.0, 0.0, 5.0f64]).unwrap();
        let (loss, grad) = cross_entropy_with_logits(&logits, &[1, 0], &[1.0, 1.0]).unwrap();
        let probs = softmax_over_last(&logits).unwrap();
        let expected_loss = -(probs.data()[1].ln() + probs.data()[3].ln());
        assert!((loss - expected_loss).abs() < 1e-12);
        for (i, (&g, &p)) in grad.data().iter().zip(probs.data()).enumerate() {
            let onehot = if i == 1 || i == 3 { 1.0 } else { 0.0 };
            assert!((g - (p - onehot)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_rows_are_ignored() {
        let logits = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 3.0, 0.0f64]).unwrap();
        let (loss, grad) = cross_entropy_with_logits(&logits, &[0, 1], &[0.0, 0.5]).unwrap();
        assert_eq!(&grad.data()[..2], &[0.0, 0.0]);
        assert!(loss > 0.0);
    }
}
