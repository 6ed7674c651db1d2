//! Dense float tensors and the parameter lists exchanged between server and
//! clients, with their canonical binary encoding.
//!
//! Wire layout for [`Parameters`]: `count:u32` BE, then per tensor
//! `ndims:u8`, `dims: ndims x u32` BE, `values: product(dims) x f64`
//! IEEE-754 BE, row-major. A scalar is `ndims = 0`.

use crate::codec::{put_f64, put_u32, ByteReader, CodecError};

/// Dense row-major tensor of 64-bit floats. Immutable after construction;
/// every element is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<u32>,
    data: Vec<f64>,
}

impl Tensor {
    /// Validates that `data` matches the shape product (empty shape = scalar,
    /// product 1) and that every element is finite.
    pub fn new(shape: Vec<u32>, data: Vec<f64>) -> Result<Self, CodecError> {
        let expected = shape_product(&shape)
            .ok_or_else(|| CodecError::MalformedEncoding("shape product overflows".into()))?;
        if expected != data.len() as u64 {
            return Err(CodecError::ShapeMismatch {
                expected: expected as usize,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::NonFiniteValue { index });
        }
        Ok(Self { shape, data })
    }

    /// Single-value tensor with the empty shape.
    ///
    /// Panics if `value` is not finite; use [`Tensor::new`] to validate.
    pub fn scalar(value: f64) -> Self {
        Self::new(vec![], vec![value]).expect("finite scalar")
    }

    pub fn zeros(shape: Vec<u32>) -> Self {
        let n = shape_product(&shape).expect("shape product overflows") as usize;
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[u32] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn shape_product(shape: &[u32]) -> Option<u64> {
    shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
}

/// Ordered list of tensors; the unit of exchange between server and clients.
/// Order is significant and preserved by the codec.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    pub tensors: Vec<Tensor>,
}

impl Parameters {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Same tensor count and pairwise equal shapes. Aggregation requires this.
    pub fn shape_compatible(&self, other: &Parameters) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

impl From<Vec<Tensor>> for Parameters {
    fn from(tensors: Vec<Tensor>) -> Self {
        Self::new(tensors)
    }
}

/// Canonical byte encoding; deterministic (same input, identical bytes).
pub fn encode_parameters(p: &Parameters) -> Vec<u8> {
    let mut out = Vec::new();
    write_parameters(&mut out, p);
    out
}

pub(crate) fn write_parameters(out: &mut Vec<u8>, p: &Parameters) {
    put_u32(out, p.tensors.len() as u32);
    for t in &p.tensors {
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            put_u32(out, d);
        }
        for &v in &t.data {
            put_f64(out, v);
        }
    }
}

/// Inverse of [`encode_parameters`]; the whole input must be consumed.
pub fn decode_parameters(bytes: &[u8]) -> Result<Parameters, CodecError> {
    let mut r = ByteReader::new(bytes);
    let p = read_parameters(&mut r)?;
    r.finish()?;
    Ok(p)
}

pub(crate) fn read_parameters(r: &mut ByteReader) -> Result<Parameters, CodecError> {
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let ndims = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32()?);
        }
        let elems = shape_product(&shape).ok_or_else(|| {
            CodecError::MalformedEncoding("declared shape product overflows".into())
        })?;
        let need = elems.checked_mul(8).ok_or_else(|| {
            CodecError::MalformedEncoding("declared shape product overflows".into())
        })?;
        if need > r.remaining() as u64 {
            return Err(CodecError::MalformedEncoding(format!(
                "declared dims need {} value bytes, {} remain",
                need,
                r.remaining()
            )));
        }
        let mut data = Vec::with_capacity(elems as usize);
        for i in 0..elems {
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(CodecError::NonFiniteValue { index: i as usize });
            }
            data.push(v);
        }
        tensors.push(Tensor { shape, data });
    }
    Ok(Parameters { tensors })
}
