//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Values are contiguous row-major `f64` buffers with an explicit shape. A
//! [`Tape`] records every primitive op applied to values it owns; calling
//! [`Tape::backward`] replays the record in exact reverse order and
//! accumulates gradients for every recorded value, including parameters
//! leased from a [`ParamStore`].
//!
//! Storage is always `f64`; a tensor tagged [`DType::F32`] keeps every value
//! rounded to the nearest `f32` after each op, and serializes as raw `f32`.
//! Gradient checking only targets the default `f64` mode.

pub mod blocks;
pub mod conv;
pub mod deform;
pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod params;
pub mod tape;

pub use params::{Init, ParamStore};
pub use tape::{Tape, ValueId};

use crate::error::{Error, Result};

/// Element storage precision. Values always live in `f64`; `F32` tensors are
/// constrained to values exactly representable in `f32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

pub fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            dtype: DType::F64,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            dtype: DType::F64,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "tensor data length {} does not match shape {}",
                data.len(),
                shape_str(shape)
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            dtype: DType::F64,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
            dtype: DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Retags the tensor; switching to `F32` rounds every element.
    pub fn with_dtype(mut self, dtype: DType) -> Tensor {
        self.dtype = dtype;
        if dtype == DType::F32 {
            self.quantize();
        }
        self
    }

    /// Rounds every element through `f32` when tagged `F32`.
    pub(crate) fn quantize(&mut self) {
        if self.dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Single scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {}",
                shape_str(&self.shape)
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if let Some((i, v)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::numeric(format!(
                "non-finite value {v} at flat index {i} in {ctx}"
            )));
        }
        Ok(())
    }

    /// Elementwise in-place add; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign shape mismatch: {} vs {}",
                shape_str(&self.shape),
                shape_str(&other.shape)
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    /// Largest absolute element (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
