//! "Same"-padded 2-D cross-correlation over (time, pitch), lowered to GEMM via im2col.

use super::linalg::{gemm, MatRef};
use super::{batch_layout, Real, Result, Tensor, TensorError};

/// Kernel geometry: `c_out × c_in × kt × kp`, both spatial extents odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kt: usize,
    pub kp: usize,
}

impl ConvShape {
    pub fn kernel_len(&self) -> usize {
        self.c_out * self.patch_len()
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kt * self.kp
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.kt.is_multiple_of(2) || self.kp.is_multiple_of(2) {
            return Err(TensorError::Shape {
                op,
                detail: format!("kernel extents must be odd, got {}x{}", self.kt, self.kp),
            });
        }
        Ok(())
    }
}

/// Fills `cols` with the `[c_in·kt·kp, (t1 - t0)·P]` patch matrix for output times `t0..t1`.
fn im2col<F: Real>(x: &[F], shape: ConvShape, t_len: usize, p_len: usize, t0: usize, t1: usize, cols: &mut Vec<F>) {
    let width = (t1 - t0) * p_len;
    cols.clear();
    cols.resize(shape.patch_len() * width, F::zero());
    let (rt, rp) = ((shape.kt / 2) as isize, (shape.kp / 2) as isize);
    let mut row = 0;
    for ci in 0..shape.c_in {
        let plane = &x[ci * t_len * p_len..(ci + 1) * t_len * p_len];
        for dt in 0..shape.kt as isize {
            for dp in 0..shape.kp as isize {
                let dst_row = &mut cols[row * width..(row + 1) * width];
                let shift = dp - rp;
                // valid output pitches p satisfy 0 <= p + shift < P
                let p_lo = (-shift).max(0) as usize;
                let p_hi = (p_len as isize - shift).min(p_len as isize).max(0) as usize;
                for t in t0..t1 {
                    let src_t = t as isize + dt - rt;
                    if src_t < 0 || src_t >= t_len as isize || p_lo >= p_hi {
                        continue;
                    }
                    let src = &plane[src_t as usize * p_len..(src_t as usize + 1) * p_len];
                    let dst = &mut dst_row[(t - t0) * p_len..(t - t0 + 1) * p_len];
                    let s0 = (p_lo as isize + shift) as usize;
                    dst[p_lo..p_hi].copy_from_slice(&src[s0..s0 + (p_hi - p_lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a full-range patch matrix back onto `dx` (`c_in × T × P`).
fn col2im_add<F: Real>(cols: &[F], shape: ConvShape, t_len: usize, p_len: usize, dx: &mut [F]) {
    let width = t_len * p_len;
    let (rt, rp) = ((shape.kt / 2) as isize, (shape.kp / 2) as isize);
    let mut row = 0;
    for ci in 0..shape.c_in {
        let plane = &mut dx[ci * width..(ci + 1) * width];
        for dt in 0..shape.kt as isize {
            for dp in 0..shape.kp as isize {
                let src_row = &cols[row * width..(row + 1) * width];
                let shift = dp - rp;
                let p_lo = (-shift).max(0) as usize;
                let p_hi = (p_len as isize - shift).min(p_len as isize).max(0) as usize;
                for t in 0..t_len {
                    let dst_t = t as isize + dt - rt;
                    if dst_t < 0 || dst_t >= t_len as isize || p_lo >= p_hi {
                        continue;
                    }
                    let dst = &mut plane[dst_t as usize * p_len..(dst_t as usize + 1) * p_len];
                    let src = &src_row[t * p_len..(t + 1) * p_len];
                    let d0 = (p_lo as isize + shift) as usize;
                    for (d, s) in dst[d0..d0 + (p_hi - p_lo)].iter_mut().zip(&src[p_lo..p_hi]) {
                        *d += *s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Single-example convolution writing output times `t0..t1` of `out` (`c_out × T × P`).
///
/// Only input times `t0 - kt/2 .. t1 + kt/2` are read.
pub(crate) fn conv_rows_forward<F: Real>(
    x: &[F],
    w: &[F],
    shape: ConvShape,
    t_len: usize,
    p_len: usize,
    t0: usize,
    t1: usize,
    out: &mut [F],
    scratch: &mut Vec<F>,
) {
    debug_assert_eq!(x.len(), shape.c_in * t_len * p_len);
    debug_assert_eq!(out.len(), shape.c_out * t_len * p_len);
    if t0 >= t1 {
        return;
    }
    im2col(x, shape, t_len, p_len, t0, t1, scratch);
    let k = shape.patch_len();
    let n = (t1 - t0) * p_len;
    gemm(shape.c_out, k, n, MatRef::new(w, k), MatRef::new(scratch, n), &mut out[t0 * p_len..], t_len * p_len, false);
}

/// Accumulates the kernel gradient of a single example into `grad_w`.
pub(crate) fn conv_rows_accumulate_grads<F: Real>(
    x: &[F],
    grad_out: &[F],
    shape: ConvShape,
    t_len: usize,
    p_len: usize,
    grad_w: &mut [F],
    scratch: &mut Vec<F>,
) {
    im2col(x, shape, t_len, p_len, 0, t_len, scratch);
    let k = shape.patch_len();
    let n = t_len * p_len;
    gemm(shape.c_out, n, k, MatRef::new(grad_out, n), MatRef::t(scratch, n), grad_w, k, true);
}

/// Accumulates the input gradient of a single example into `grad_x`.
pub(crate) fn conv_rows_input_grad<F: Real>(
    w: &[F],
    grad_out: &[F],
    shape: ConvShape,
    t_len: usize,
    p_len: usize,
    grad_x: &mut [F],
    scratch: &mut Vec<F>,
) {
    let k = shape.patch_len();
    let n = t_len * p_len;
    scratch.clear();
    scratch.resize(k * n, F::zero());
    gemm(k, shape.c_out, n, MatRef::t(w, k), MatRef::new(grad_out, n), scratch, n, false);
    col2im_add(scratch, shape, t_len, p_len, grad_x);
}

fn kernel_shape(op: &'static str, kernels: &Tensor<impl Real>) -> Result<ConvShape> {
    match *kernels.shape() {
        [c_out, c_in, kt, kp] => {
            let shape = ConvShape { c_in, c_out, kt, kp };
            shape.validate(op)?;
            Ok(shape)
        }
        _ => Err(TensorError::Shape { op, detail: format!("kernels must be rank 4, got {:?}", kernels.shape()) }),
    }
}

/// Zero-padded cross-correlation preserving the time and pitch extents.
///
/// `input` is `[C_in, T, P]` or `[B, C_in, T, P]`; `kernels` is `[C_out, C_in, k_t, k_p]`.
pub fn conv2d_same<F: Real>(input: &Tensor<F>, kernels: &Tensor<F>) -> Result<Tensor<F>> {
    let shape = kernel_shape("conv2d_same", kernels)?;
    let (b, c, t, p) = batch_layout("conv2d_same", input.shape())?;
    if c != shape.c_in {
        return Err(TensorError::Shape {
            op: "conv2d_same",
            detail: format!("input has {c} channels, kernels expect {}", shape.c_in),
        });
    }
    let mut out_shape = input.shape().to_vec();
    let channel_axis = out_shape.len() - 3;
    out_shape[channel_axis] = shape.c_out;
    let mut out = Tensor::zeros(&out_shape);
    let mut scratch = Vec::new();
    let (in_stride, out_stride) = (c * t * p, shape.c_out * t * p);
    for bi in 0..b {
        conv_rows_forward(
            &input.data()[bi * in_stride..(bi + 1) * in_stride],
            kernels.data(),
            shape,
            t,
            p,
            0,
            t,
            &mut out.data_mut()[bi * out_stride..(bi + 1) * out_stride],
            &mut scratch,
        );
    }
    out.check_finite("conv2d_same")?;
    Ok(out)
}

/// Gradients of a scalar loss with respect to the kernels and the input of [`conv2d_same`].
pub fn conv2d_same_backward<F: Real>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let shape = kernel_shape("conv2d_same_backward", kernels)?;
    let (b, c, t, p) = batch_layout("conv2d_same_backward", input.shape())?;
    let (gb, gc, gt, gp) = batch_layout("conv2d_same_backward", grad_out.shape())?;
    if c != shape.c_in || (gb, gc, gt, gp) != (b, shape.c_out, t, p) {
        return Err(TensorError::Shape {
            op: "conv2d_same_backward",
            detail: format!("input {:?}, kernels {:?}, grad {:?}", input.shape(), kernels.shape(), grad_out.shape()),
        });
    }
    let mut grad_w = Tensor::zeros(kernels.shape());
    let mut grad_x = Tensor::zeros(input.shape());
    let mut scratch = Vec::new();
    let (in_stride, out_stride) = (c * t * p, shape.c_out * t * p);
    for bi in 0..b {
        let x = &input.data()[bi * in_stride..(bi + 1) * in_stride];
        let g = &grad_out.data()[bi * out_stride..(bi + 1) * out_stride];
        conv_rows_accumulate_grads(x, g, shape, t, p, grad_w.data_mut(), &mut scratch);
        conv_rows_input_grad(
            kernels.data(),
            g,
            shape,
            t,
            p,
            &mut grad_x.data_mut()[bi * in_stride..(bi + 1) * in_stride],
            &mut scratch,
        );
    }
    grad_w.check_finite("conv2d_same_backward (kernels)")?;
    grad_x.check_finite("conv2d_same_backward (input)")?;
    Ok((grad_w, grad_x))
}
