//! Binary checkpoint container.
//!
//! ```text
//! magic "CPNADE\r\n" | u32 version | u32 len, config JSON | u32 tensor count
//! per tensor: u16 len, name | u8 dtype (0 = f32, 1 = f64) | u8 ndim | u64 dims... | raw LE values
//! ```
//!
//! All integers are little-endian. Writing and reading back is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    CellSession, ConditionalModel, Distributions, LayerParameters, Model, ModelConfig, ModelError, ModelParameters,
    Result,
};
use crate::ndtensor::{BatchNormState, DType, Real, Tensor};
use crate::pianoroll::{ContextMask, Pianoroll};

const MAGIC: &[u8; 8] = b"CPNADE\r\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
}

struct Entry<'a, F> {
    name: String,
    dims: Vec<usize>,
    values: &'a [F],
}

fn entries<F: Real>(model: &Model<F>) -> Vec<Entry<'_, F>> {
    let mut out = Vec::new();
    for (idx, layer) in model.params.layers.iter().enumerate() {
        let l = idx + 1;
        let n = &layer.norm;
        let c = n.gamma.len();
        let mut push = |suffix: &str, dims: Vec<usize>, values| {
            out.push(Entry { name: format!("layer{l}.{suffix}"), dims, values })
        };
        push("kernels", layer.kernels.shape().to_vec(), layer.kernels.data());
        push("gamma", vec![c], &n.gamma[..]);
        push("beta", vec![c], &n.beta[..]);
        push("running_mean", vec![c], &n.running_mean[..]);
        push("running_var", vec![c], &n.running_var[..]);
        push("epsilon", vec![1], std::slice::from_ref(&n.epsilon));
        push("momentum", vec![1], std::slice::from_ref(&n.momentum));
    }
    out
}

pub(crate) fn encode<F: Real>(model: &Model<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header { config: model.config }).expect("config serializes");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let list = entries(model);
    out.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for e in list {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(F::DTYPE.tag());
        out.push(e.dims.len() as u8);
        for d in &e.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        F::write_le(e.values, &mut out);
    }
    out
}

pub fn write_checkpoint<F: Real>(model: &Model<F>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(ModelError::Checkpoint { path: self.path.to_string(), detail: detail.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail("truncated file");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Raw {
    config: ModelConfig,
    dtype: DType,
    tensors: Vec<(String, Vec<usize>, Vec<u8>)>,
}

fn parse(bytes: &[u8], path: &str) -> Result<Raw> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8)? != MAGIC {
        return c.fail("not a checkpoint (bad magic)");
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return c.fail(format!("unsupported version {version}"));
    }
    let len = c.u32()? as usize;
    let header: Header = match serde_json::from_slice(c.take(len)?) {
        Ok(h) => h,
        Err(e) => return c.fail(format!("bad header: {e}")),
    };
    let count = c.u32()? as usize;
    let mut dtype = None;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u16()? as usize;
        let name = String::from_utf8_lossy(c.take(n)?).into_owned();
        let Some(dt) = DType::from_tag(c.u8()?) else {
            return c.fail(format!("{name}: unknown dtype"));
        };
        if *dtype.get_or_insert(dt) != dt {
            return c.fail("mixed dtypes");
        }
        let ndim = c.u8()? as usize;
        let dims = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let size = dims.iter().product::<usize>() * dt.size();
        tensors.push((name, dims, c.take(size)?.to_vec()));
    }
    if c.pos != bytes.len() {
        return c.fail("trailing bytes");
    }
    Ok(Raw { config: header.config, dtype: dtype.unwrap_or(DType::F64), tensors })
}

fn assemble<F: Real>(raw: Raw, path: &str) -> Result<Model<F>> {
    let fail = |detail: String| ModelError::Checkpoint { path: path.to_string(), detail };
    raw.config.validate()?;
    let mut tensors = raw.tensors.into_iter();
    let mut next = |expect: String, dims: Vec<usize>| -> Result<Vec<F>> {
        let (name, got, bytes) = tensors.next().ok_or_else(|| fail(format!("missing {expect}")))?;
        if name != expect || got != dims {
            return Err(fail(format!("expected {expect} {dims:?}, found {name} {got:?}")));
        }
        Ok(F::read_le(&bytes))
    };
    let mut layers = Vec::with_capacity(raw.config.num_layers);
    for l in 1..=raw.config.num_layers {
        let s = raw.config.layer_shape(l);
        let dims = vec![s.c_out, s.c_in, s.kt, s.kp];
        let kernels = Tensor::from_vec(&dims, next(format!("layer{l}.kernels"), dims.clone())?)?;
        let ch = vec![s.c_out];
        let norm = BatchNormState {
            gamma: next(format!("layer{l}.gamma"), ch.clone())?,
            beta: next(format!("layer{l}.beta"), ch.clone())?,
            running_mean: next(format!("layer{l}.running_mean"), ch.clone())?,
            running_var: next(format!("layer{l}.running_var"), ch)?,
            epsilon: next(format!("layer{l}.epsilon"), vec![1])?[0],
            momentum: next(format!("layer{l}.momentum"), vec![1])?[0],
        };
        layers.push(LayerParameters { kernels, norm });
    }
    if let Some((name, _, _)) = tensors.next() {
        return Err(fail(format!("unexpected tensor {name}")));
    }
    Model::new(raw.config, ModelParameters { layers })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

/// Reads a checkpoint whose dtype must be `F`.
pub fn read_checkpoint<F: Real>(path: &Path) -> Result<Model<F>> {
    let shown = path.display().to_string();
    let raw = parse(&read_bytes(path)?, &shown)?;
    if raw.dtype != F::DTYPE {
        return Err(ModelError::Checkpoint {
            path: shown,
            detail: format!("stored as {:?}, requested {:?}", raw.dtype, F::DTYPE),
        });
    }
    assemble(raw, &shown)
}

/// A model of either width, as stored.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => m.config(),
            AnyModel::F64(m) => m.config(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyModel::F32(_) => DType::F32,
            AnyModel::F64(_) => DType::F64,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            AnyModel::F32(m) => m.save(path),
            AnyModel::F64(m) => m.save(path),
        }
    }
}

impl ConditionalModel for AnyModel {
    fn instruments(&self) -> usize {
        self.config().instruments
    }

    fn pitches(&self) -> usize {
        self.config().pitches
    }

    fn conditionals(&self, roll: &Pianoroll, mask: &ContextMask) -> Result<Distributions> {
        match self {
            AnyModel::F32(m) => m.conditionals(roll, mask),
            AnyModel::F64(m) => m.conditionals(roll, mask),
        }
    }

    fn session<'a>(&'a self, roll: &Pianoroll, mask: &ContextMask) -> Result<Box<dyn CellSession + 'a>> {
        match self {
            AnyModel::F32(m) => m.session(roll, mask),
            AnyModel::F64(m) => m.session(roll, mask),
        }
    }
}

/// Reads a checkpoint of either dtype.
pub fn read_checkpoint_any(path: &Path) -> Result<AnyModel> {
    let shown = path.display().to_string();
    let raw = parse(&read_bytes(path)?, &shown)?;
    match raw.dtype {
        DType::F32 => Ok(AnyModel::F32(assemble(raw, &shown)?)),
        DType::F64 => Ok(AnyModel::F64(assemble(raw, &shown)?)),
    }
}
