//! Dense tensors with an optional gradient buffer.
//!
//! Storage is row-major and owned. The gradient lives beside the data so a
//! parameter and its gradient can never disagree on shape.

use crate::error::{EngineError, Result};
use crate::scalar::Scalar;

/// A dense row-major tensor. `grad`, when present, has identical length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::ZERO; n], grad: None }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    /// Builds a tensor from existing data; the element count must match.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(EngineError::InvalidArg(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Gradient buffer, if one has been populated.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, zero-initializing it on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::ZERO; n])
    }

    /// Replaces the gradient outright. Length must match the data.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(EngineError::InvalidArg(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Drops the gradient buffer.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Converts elements (and gradient, if any) to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.to_f64())).collect()),
        }
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let r = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]);
        assert!(matches!(r, Err(EngineError::InvalidArg(_))));
    }

    #[test]
    fn grad_mut_initializes_zeroed_buffer() {
        let mut t = Tensor::<f32>::zeros(&[4]);
        assert!(t.grad().is_none());
        t.grad_mut()[2] = 1.5;
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 1.5, 0.0]);
    }

    #[test]
    fn cast_round_trips_values() {
        let t = Tensor::<f64>::from_vec(&[3], vec![1.5, -2.25, 0.125]).unwrap();
        let f: Tensor<f32> = t.cast();
        assert_eq!(f.data(), &[1.5f32, -2.25, 0.125]);
    }
}
