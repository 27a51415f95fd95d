//! Tensor container and checkpoint object model.
//!
//! A [`TensorBlob`] is a named, shaped, flat byte buffer. Its serialized form
//! (the `BSNP` container) is:
//!
//! ```text
//! magic "BSNP" | version u16 | dtype u8 | name_len u16 | name | rank u8 | extents u64 x rank | payload
//! ```
//!
//! All integers are little-endian. F16 payloads are raw IEEE 754 binary16 bits
//! and are never widened.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::wire::{self, Reader};

pub const TENSOR_MAGIC: &[u8; 4] = b"BSNP";
pub const TENSOR_VERSION: u16 = 1;
/// magic + version + dtype + name length + rank.
pub const TENSOR_HEADER_FIXED: usize = 4 + 2 + 1 + 2 + 1;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementType {
    F16,
    F32,
}

impl ElementType {
    pub const fn byte_width(self) -> usize {
        match self {
            ElementType::F16 => 2,
            ElementType::F32 => 4,
        }
    }

    pub const fn tag(self) -> u8 {
        match self {
            ElementType::F16 => 1,
            ElementType::F32 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(ElementType::F16),
            2 => Ok(ElementType::F32),
            t => Err(Error::InvalidTensor(format!("unknown dtype tag {t}"))),
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            ElementType::F16 => "f16",
            ElementType::F32 => "f32",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorBlob {
    name: String,
    dtype: ElementType,
    shape: Vec<u64>,
    data: Vec<u8>,
}

impl TensorBlob {
    pub fn new(
        name: impl Into<String>,
        dtype: ElementType,
        shape: Vec<u64>,
        data: Vec<u8>,
    ) -> Result<Self> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidTensor(format!(
                "name is {} bytes, limit is 65535",
                name.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::InvalidTensor(format!(
                "rank {} exceeds 255",
                shape.len()
            )));
        }
        let expected = wire::numel(&shape)
            .and_then(|n| n.checked_mul(dtype.byte_width() as u64))
            .ok_or_else(|| Error::InvalidTensor(format!("shape {shape:?} overflows")))?;
        if data.len() as u64 != expected {
            return Err(Error::InvalidTensor(format!(
                "`{name}`: data is {} bytes, shape {shape:?} x {} needs {expected}",
                data.len(),
                dtype.name()
            )));
        }
        Ok(TensorBlob {
            name,
            dtype,
            shape,
            data,
        })
    }

    pub fn from_f16_bits(name: impl Into<String>, shape: Vec<u64>, bits: &[u16]) -> Result<Self> {
        let data = bits.iter().flat_map(|b| b.to_le_bytes()).collect();
        Self::new(name, ElementType::F16, shape, data)
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<u64>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, ElementType::F32, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> ElementType {
        self.dtype
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len() / self.dtype.byte_width()
    }

    /// Raw binary16 bit patterns. Empty for non-F16 tensors.
    pub fn f16_bits(&self) -> Vec<u16> {
        if self.dtype != ElementType::F16 {
            return Vec::new();
        }
        self.data
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect()
    }

    /// Element values for F32 tensors. Empty for other dtypes.
    pub fn f32_values(&self) -> Vec<f32> {
        if self.dtype != ElementType::F32 {
            return Vec::new();
        }
        self.data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn serialized_len(&self) -> usize {
        TENSOR_HEADER_FIXED + self.name.len() + 8 * self.shape.len() + self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(TENSOR_MAGIC);
        wire::put_u16(&mut out, TENSOR_VERSION);
        wire::put_u8(&mut out, self.dtype.tag());
        wire::put_name(&mut out, &self.name);
        wire::put_shape(&mut out, &self.shape);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "tensor");
        r.magic(TENSOR_MAGIC)?;
        r.version("BSNP tensor", TENSOR_VERSION)?;
        let dtype = ElementType::from_tag(r.u8()?)?;
        let name = r.name()?;
        let shape = r.shape()?;
        let len = wire::numel(&shape)
            .and_then(|n| n.checked_mul(dtype.byte_width() as u64))
            .ok_or_else(|| Error::InvalidTensor(format!("shape {shape:?} overflows")))?;
        let data = r.take_u64(len)?.to_vec();
        if r.remaining() != 0 {
            return Err(Error::InvalidTensor(format!(
                "{} trailing bytes after `{name}`",
                r.remaining()
            )));
        }
        Self::new(name, dtype, shape, data)
    }
}

pub fn serialize_tensor(t: &TensorBlob) -> Vec<u8> {
    t.to_bytes()
}

pub fn deserialize_tensor(bytes: &[u8]) -> Result<TensorBlob> {
    TensorBlob::from_bytes(bytes)
}

/// Model states (F16) and optimizer states (F32) of one training iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub model_states: Vec<TensorBlob>,
    pub optimizer_states: Vec<TensorBlob>,
}

impl Checkpoint {
    pub fn new(
        iteration: u64,
        model_states: Vec<TensorBlob>,
        optimizer_states: Vec<TensorBlob>,
    ) -> Result<Self> {
        let ckpt = Checkpoint {
            iteration,
            model_states,
            optimizer_states,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.model_states {
            if t.dtype() != ElementType::F16 {
                return Err(Error::InvalidCheckpoint(format!(
                    "model state `{}` is {}, expected f16",
                    t.name(),
                    t.dtype().name()
                )));
            }
            if !seen.insert(t.name()) {
                return Err(Error::InvalidCheckpoint(format!(
                    "duplicate tensor name `{}`",
                    t.name()
                )));
            }
        }
        for t in &self.optimizer_states {
            if t.dtype() != ElementType::F32 {
                return Err(Error::InvalidCheckpoint(format!(
                    "optimizer state `{}` is {}, expected f32",
                    t.name(),
                    t.dtype().name()
                )));
            }
            if !seen.insert(t.name()) {
                return Err(Error::InvalidCheckpoint(format!(
                    "duplicate tensor name `{}`",
                    t.name()
                )));
            }
        }
        Ok(())
    }

    pub fn model_bytes(&self) -> usize {
        self.model_states.iter().map(|t| t.data().len()).sum()
    }

    pub fn optimizer_bytes(&self) -> usize {
        self.optimizer_states.iter().map(|t| t.data().len()).sum()
    }

    /// Checks that `other` has the same model-state names, shapes and order.
    pub fn check_same_structure(&self, other: &Checkpoint) -> Result<()> {
        if self.model_states.len() != other.model_states.len() {
            return Err(Error::StructureMismatch(format!(
                "iteration {} has {} model tensors, iteration {} has {}",
                self.iteration,
                self.model_states.len(),
                other.iteration,
                other.model_states.len()
            )));
        }
        for (a, b) in self.model_states.iter().zip(&other.model_states) {
            if a.name() != b.name() || a.shape() != b.shape() {
                return Err(Error::StructureMismatch(format!(
                    "`{}` {:?} at iteration {} vs `{}` {:?} at iteration {}",
                    a.name(),
                    a.shape(),
                    self.iteration,
                    b.name(),
                    b.shape(),
                    other.iteration
                )));
            }
        }
        Ok(())
    }

    /// `BSCK` checkpoint bundle: header, then each tensor as a u64 length plus
    /// its `BSNP` bytes, model states first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        wire::put_u16(&mut out, CHECKPOINT_VERSION);
        wire::put_u64(&mut out, self.iteration);
        wire::put_u32(&mut out, self.model_states.len() as u32);
        wire::put_u32(&mut out, self.optimizer_states.len() as u32);
        for t in self.model_states.iter().chain(&self.optimizer_states) {
            wire::put_u64(&mut out, t.serialized_len() as u64);
            out.extend_from_slice(&t.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        r.version("BSCK checkpoint", CHECKPOINT_VERSION)?;
        let iteration = r.u64()?;
        let n_model = r.u32()? as usize;
        let n_opt = r.u32()? as usize;
        let mut read_tensor = || -> Result<TensorBlob> {
            let len = r.u64()?;
            TensorBlob::from_bytes(r.take_u64(len)?)
        };
        let model_states = (0..n_model)
            .map(|_| read_tensor())
            .collect::<Result<Vec<_>>>()?;
        let optimizer_states = (0..n_opt)
            .map(|_| read_tensor())
            .collect::<Result<Vec<_>>>()?;
        Checkpoint::new(iteration, model_states, optimizer_states)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)
    }
}
