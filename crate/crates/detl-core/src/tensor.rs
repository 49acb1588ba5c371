//! Dense n-dimensional tensors.
//!
//! Storage is `f32`, row-major, with a fixed NCHW layout for 4-d tensors.
//! Reductions inside the math kernels accumulate in `f64`. A tensor may carry
//! a gradient of identical shape; gradients are populated by
//! [`crate::tape::Tape::backward`].

use crate::error::{Error, Result};

/// Dense tensor: shape, flat data, optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Build a tensor from a flat buffer. Errors if the element count does
    /// not match the shape or any value is non-finite.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{numel} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "Tensor::from_vec",
                "positive extents",
                format!("{shape:?}"),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor::from_vec".into()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Gradient buffer, if backward has populated one.
    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Install a gradient. The buffer must match the tensor's element count.
    pub fn set_grad(&mut self, grad: Vec<f32>) {
        assert_eq!(grad.len(), self.data.len(), "grad length must match data");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// True if every stored value is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The four extents of an NCHW tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                "dims4",
                "4-d tensor (NCHW)",
                format!("{:?}", self.shape),
            )),
        }
    }

    /// The two extents of a matrix-shaped tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                "dims2",
                "2-d tensor",
                format!("{:?}", self.shape),
            )),
        }
    }
}

/// Format a shape for error messages.
pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    format!("{shape:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(&[2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Tensor::from_vec(&[2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::from_vec(&[1], vec![f32::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn from_vec_rejects_zero_extent() {
        assert!(Tensor::from_vec(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn grad_roundtrip() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.grad().is_none());
        t.set_grad(vec![1.0; 4]);
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }
}
