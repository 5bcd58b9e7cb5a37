//! Dense row-major tensors shared by the numeric kernel and the wire codec.

use std::fmt;

use thiserror::Error;

/// Element type of a [`DenseTensor`], with its on-wire tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I64,
    U8,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::I64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    /// Size of one element in bytes.
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I64 => 8,
            DType::U8 => 1,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::I64 => "i64",
            DType::U8 => "u8",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I64(_) => DType::I64,
            TensorData::U8(_) => DType::U8,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<u32>,
        expected: usize,
        actual: usize,
    },
    #[error("expected a {expected} tensor, found {actual}")]
    WrongDType { expected: DType, actual: DType },
}

/// A dense tensor: a shape plus row-major element storage.
///
/// The element count always equals the product of the shape, which is
/// enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<u32>,
    data: TensorData,
}

impl DenseTensor {
    pub fn new(shape: Vec<u32>, data: TensorData) -> Result<Self, TensorError> {
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn from_f32(shape: Vec<u32>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i64(shape: Vec<u32>, data: Vec<i64>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::I64(data))
    }

    pub fn from_u8(shape: Vec<u32>, data: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::U8(data))
    }

    /// 1-D f32 tensor.
    pub fn vector(data: Vec<f32>) -> Self {
        let n = data.len() as u32;
        DenseTensor {
            shape: vec![n],
            data: TensorData::F32(data),
        }
    }

    pub fn zeros(shape: Vec<u32>) -> Self {
        let n = element_count(&shape);
        DenseTensor {
            shape,
            data: TensorData::F32(vec![0.0; n]),
        }
    }

    pub fn shape(&self) -> &[u32] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Raw payload size in bytes.
    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size()
    }

    pub fn as_f32(&self) -> Result<&[f32], TensorError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::WrongDType {
                expected: DType::F32,
                actual: other.dtype(),
            }),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32], TensorError> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::WrongDType {
                expected: DType::F32,
                actual: other.dtype(),
            }),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64], TensorError> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            other => Err(TensorError::WrongDType {
                expected: DType::I64,
                actual: other.dtype(),
            }),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], TensorError> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(TensorError::WrongDType {
                expected: DType::U8,
                actual: other.dtype(),
            }),
        }
    }

    pub fn into_parts(self) -> (Vec<u32>, TensorData) {
        (self.shape, self.data)
    }
}

pub(crate) fn element_count(shape: &[u32]) -> usize {
    shape.iter().map(|&d| d as usize).product()
}
