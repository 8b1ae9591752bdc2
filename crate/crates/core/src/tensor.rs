//! Dense f64 tensors in channel-major layout.
//!
//! Everything in this crate runs at 64-bit precision so analytic gradients can
//! be checked against central finite differences to tight tolerances.

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64`. Feature maps use `[channels, height, width]`,
/// convolution weights `[out, in, kh, kw]`, biases `[out]`, scalars rank 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
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

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Channel count of a `[c, h, w]` tensor.
    pub fn c(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        self.shape[0]
    }

    pub fn h(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        self.shape[1]
    }

    pub fn w(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        self.shape[2]
    }

    pub fn is_chw(&self) -> bool {
        self.shape.len() == 3
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Checks two tensors share a shape, for ops with same-shape contracts.
    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

/// A single-channel map `[h, w]` stored as a `[1, h, w]` tensor is common enough
/// that these aliases keep signatures readable.
pub type FeatureMap = Tensor;
pub type ProbabilityMap = Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn chw_accessors() {
        let t = Tensor::zeros(&[3, 4, 5]);
        assert_eq!((t.c(), t.h(), t.w()), (3, 4, 5));
        assert_eq!(t.numel(), 60);
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.item(), 2.5);
    }
}
