//! Minimal dense tensors with forward and gradient kernels.
//!
//! This is not a general autodiff engine. Every operator the network needs comes as a
//! forward function plus an explicit backward function; the model wires them together by
//! hand. Storage is row-major, and batched activations use the `[batch, channel, time, pitch]`
//! layout (a rank-3 tensor is treated as a batch of one).

mod batchnorm;
mod conv;
mod linalg;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batchnorm::{
    batch_norm, batch_norm_backward, batch_norm_infer, batch_norm_train, BatchNormCache, BatchNormState, BatchStats,
    Mode,
};
pub(crate) use batchnorm::{train_backward, train_forward};
pub use conv::{conv2d_same, conv2d_same_backward, ConvShape};
pub(crate) use conv::{conv_rows_accumulate_grads, conv_rows_forward, conv_rows_input_grad};
pub use linalg::{matmul, matmul_backward};
pub(crate) use ops::log_softmax_row;
pub use ops::{add, cross_entropy_with_logits, relu, relu_backward, softmax_over_last};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Storage width of a floating-point tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types the tensor kernels are instantiated for (`f32` and `f64`).
pub trait Real: Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64_lossy(value: f64) -> Self;

    fn write_le(values: &[Self], out: &mut Vec<u8>);

    /// Decodes little-endian values; `bytes.len()` must be a multiple of the width.
    fn read_le(bytes: &[u8]) -> Vec<Self>;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(value: f64) -> Self {
        value as f32
    }

    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(value: f64) -> Self {
        value
    }

    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])).collect()
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); len] }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("shape {:?} needs {} values, got {}", shape, len, data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(TensorError::Shape { op: "reshape", detail: format!("{:?} -> {:?}", self.shape, shape) });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    /// Returns an error naming `op` if any value is NaN or infinite.
    pub fn check_finite(&self, op: impl Into<String>) -> Result<()> {
        check_finite(&self.data, op)
    }
}

pub(crate) fn check_finite<F: Real>(values: &[F], op: impl Into<String>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op: op.into() })
    }
}

/// Splits a rank-3 `[C, T, P]` or rank-4 `[B, C, T, P]` shape into `(batch, channels, T, P)`.
pub(crate) fn batch_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, t, p] => Ok((1, c, t, p)),
        [b, c, t, p] => Ok((b, c, t, p)),
        _ => Err(TensorError::Shape { op, detail: format!("expected rank 3 or 4, got {:?}", shape) }),
    }
}
