//! Core tensor wrappers used throughout the network code.

use ndarray::{Array4, ArrayD};

use crate::error::{Result, SegError};

/// A batch of feature maps in `(batch, channels, height, width)` layout.
///
/// The newtype guarantees that every stored value is finite, which lets the
/// attention and loss code assume well-formed inputs instead of re-checking.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack(Array4<f64>);

impl FeatureStack {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        let (_, c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(SegError::input(format!(
                "feature stack needs nonzero channel and spatial dims, got ({c}, {h}, {w})"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SegError::input("feature stack contains non-finite values"));
        }
        Ok(FeatureStack(values))
    }

    /// Wrap values that are known to be finite by construction.
    pub(crate) fn from_trusted(values: Array4<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        FeatureStack(values)
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array4<f64> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}
