//! Dense tensors over a runtime-selectable element precision.
//!
//! Every value in the model is a [`Tensor`]: a shape plus a flat row-major
//! buffer. The element type is generic so the whole pipeline can run in
//! 64-bit (gradient and oracle checks) or 32-bit (training and serving)
//! without duplicated code.

use crate::error::{Result, RiaError};

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
///
/// All arithmetic the engine needs routes through this trait, so the same
/// graph code evaluates in either precision with identical operation order.
pub trait Elem:
    Copy
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    /// Bytes per element in the on-disk encoding (4 or 8).
    const WIDTH: usize;
    /// Tag written into checkpoints and cache entries.
    const TAG: u8;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Elem for f32 {
    const WIDTH: usize = 4;
    const TAG: u8 = 4;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Elem for f64 {
    const WIDTH: usize = 8;
    const TAG: u8 = 8;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Dense array with row-major layout. `product(shape) == data.len()` always.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Elem> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(RiaError::Shape {
                op: "tensor-new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![E::zero(); numel],
        }
    }

    pub fn scalar(v: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when the tensor is viewed as `[rows × last_dim]`.
    pub fn leading(&self) -> usize {
        self.numel() / self.last_dim()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(RiaError::Contract {
                module: "tensor",
                detail: format!("item() on non-scalar shape {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Little-endian byte image of the buffer. Bit-exact round trip.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * E::WIDTH);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if bytes.len() != numel * E::WIDTH {
            return Err(RiaError::Checkpoint(format!(
                "buffer length {} does not match shape {:?} at width {}",
                bytes.len(),
                shape,
                E::WIDTH
            )));
        }
        let data = bytes.chunks_exact(E::WIDTH).map(E::read_le).collect();
        Self::new(shape, data)
    }
}
