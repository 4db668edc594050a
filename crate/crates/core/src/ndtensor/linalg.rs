use super::{Real, Result, Tensor, TensorError};

/// Operand of [`gemm`]: a row-major matrix slice, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, F> {
    pub data: &'a [F],
    /// Row stride of the stored (untransposed) matrix.
    pub stride: usize,
    pub transposed: bool,
}

impl<'a, F> MatRef<'a, F> {
    pub fn new(data: &'a [F], stride: usize) -> Self {
        MatRef { data, stride, transposed: false }
    }

    pub fn t(data: &'a [F], stride: usize) -> Self {
        MatRef { data, stride, transposed: true }
    }

    fn strides(&self) -> (isize, isize) {
        // (column stride, row stride) of the logical operand
        if self.transposed {
            (self.stride as isize, 1)
        } else {
            (1, self.stride as isize)
        }
    }

    fn required_len(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        if self.transposed {
            (cols - 1) * self.stride + rows
        } else {
            (rows - 1) * self.stride + cols
        }
    }
}

/// `dst[m×n] (+)= lhs[m×k] · rhs[k×n]` where `dst` has row stride `dst_stride`.
///
/// When `accumulate` is false the previous contents of `dst` are ignored.
pub(crate) fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    lhs: MatRef<'_, F>,
    rhs: MatRef<'_, F>,
    dst: &mut [F],
    dst_stride: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(lhs.data.len() >= lhs.required_len(m, k), "gemm: lhs too short");
    assert!(rhs.data.len() >= rhs.required_len(k, n), "gemm: rhs too short");
    assert!(n <= dst_stride && dst.len() >= (m - 1) * dst_stride + n, "gemm: dst too short");
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                dst[r * dst_stride..r * dst_stride + n].fill(F::zero());
            }
        }
        return;
    }
    let (lhs_cs, lhs_rs) = lhs.strides();
    let (rhs_cs, rhs_rs) = rhs.strides();
    // SAFETY: the asserts above bound every index the kernel touches for the given strides.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            dst_stride as isize,
            accumulate,
            lhs.data.as_ptr(),
            lhs_cs,
            lhs_rs,
            rhs.data.as_ptr(),
            rhs_cs,
            rhs_rs,
            F::one(),
            F::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn matrix_dims(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::Shape { op, detail: format!("expected a matrix, got {:?}", t.shape()) }),
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(TensorError::Shape { op: "matmul", detail: format!("{:?} x {:?}", a.shape(), b.shape()) });
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, MatRef::new(a.data(), k), MatRef::new(b.data(), n), out.data_mut(), n, false);
    Ok(out)
}

/// Gradients of a scalar loss with respect to both matmul operands.
pub fn matmul_backward<F: Real>(a: &Tensor<F>, b: &Tensor<F>, grad_out: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    let (m, k) = matrix_dims("matmul_backward", a)?;
    let (_, n) = matrix_dims("matmul_backward", b)?;
    if grad_out.shape() != [m, n] {
        return Err(TensorError::Shape {
            op: "matmul_backward",
            detail: format!("grad {:?}, expected [{m}, {n}]", grad_out.shape()),
        });
    }
    let mut grad_a = Tensor::zeros(&[m, k]);
    gemm(m, n, k, MatRef::new(grad_out.data(), n), MatRef::t(b.data(), n), grad_a.data_mut(), k, false);
    let mut grad_b = Tensor::zeros(&[k, n]);
    gemm(k, m, n, MatRef::t(a.data(), k), MatRef::new(grad_out.data(), n), grad_b.data_mut(), n, false);
    grad_a.check_finite("matmul_backward")?;
    grad_b.check_finite("matmul_backward")?;
    Ok((grad_a, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands_match_naive_product() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for l in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + l] * b[l * 4 + j];
                }
            }
        }
        // a^T stored as 3x2, b^T stored as 4x3
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut out = vec![0.0; 8];
        gemm(2, 3, 4, MatRef::t(&at, 2), MatRef::t(&bt, 3), &mut out, 4, false);
        assert_eq!(out, naive);
        gemm(2, 3, 4, MatRef::new(&a, 3), MatRef::new(&b, 4), &mut out, 4, true);
        let doubled: Vec<f64> = naive.iter().map(|x| 2.0 * x).collect();
        assert_eq!(out, doubled);
    }

    #[test]
    fn squared_loss_gradient_matches_closed_form() {
        // loss = |xw - y|^2, dloss/dw = 2 x^T (xw - y)
        let x = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![0.3, -0.7]).unwrap();
        let y = [1.0, -1.0, 0.25];
        let pred = matmul(&x, &w).unwrap();
        let resid: Vec<f64> = pred.data().iter().zip(&y).map(|(p, t)| p - t).collect();
        let grad_pred = Tensor::from_vec(&[3, 1], resid.iter().map(|r| 2.0 * r).collect()).unwrap();
        let (_, grad_w) = matmul_backward(&x, &w, &grad_pred).unwrap();
        let mut expected = [0.0; 2];
        for (row, r) in resid.iter().enumerate() {
            for (col, e) in expected.iter_mut().enumerate() {
                *e += 2.0 * x.data()[row * 2 + col] * r;
            }
        }
        for (g, e) in grad_w.data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_dimension_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(TensorError::Shape { .. })));
    }
}
