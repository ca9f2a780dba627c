//! Dense row-major tensors with a per-tensor precision mode.
//!
//! Storage is always `f64`; tensors in `Standard32` mode round every stored
//! value to the nearest `f32` so that training numerics genuinely live on the
//! 32-bit grid while gradient checking can run the identical graph at full
//! 64-bit resolution.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Values are rounded to the nearest f32 after every operation.
    Standard32,
    /// Full f64 resolution; used by finite-difference checks.
    Extended64,
}

impl Precision {
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::Standard32 => x as f32 as f64,
            Precision::Extended64 => x,
        }
    }
}

/// A dense tensor: shape, flat row-major data, precision mode.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    precision: Precision,
}

impl Tensor {
    /// Builds a tensor, validating length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape wants {numel} values, got {}", data.len()),
            });
        }
        let data: Vec<f64> = data.into_iter().map(|x| precision.quantize(x)).collect();
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            precision,
        })
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; numel]),
            precision,
        }
    }

    pub fn scalar(x: f64, precision: Precision) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![precision.quantize(x)]),
            precision,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scalar tensors (shape `[]` or `[1]`) expose their single value.
    pub fn scalar_value(&self) -> Option<f64> {
        if self.data.len() == 1 {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Rows × cols view of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            precision,
        }
    }

    /// Mutates in place, cloning the buffer only if it is shared.
    pub(crate) fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts to the given precision mode, re-quantizing the payload.
    pub fn to_precision(&self, precision: Precision) -> Self {
        if precision == self.precision {
            return self.clone();
        }
        let data = self.data.iter().map(|&x| precision.quantize(x)).collect();
        Self::from_raw(self.shape.clone(), data, precision)
    }
}

/// Exact equality of shape and payload bits.
pub fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

pub(crate) fn same_precision(op: &'static str, ts: &[&Tensor]) -> Result<Precision> {
    let p = ts
        .first()
        .map(|t| t.precision())
        .unwrap_or(Precision::Extended64);
    if ts.iter().any(|t| t.precision() != p) {
        return Err(Error::PrecisionMismatch { op });
    }
    Ok(p)
}
