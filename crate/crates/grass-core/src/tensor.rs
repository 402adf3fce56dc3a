//! Dense row-major tensors.
//!
//! Tensors are plain value types: shape, contiguous data, and a
//! requires-grad flag read when the tensor is registered on a tape.
//! They are immutable once handed to a graph, which makes them safe to
//! share with reader threads between steps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::CoreError;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor, validating that every extent is positive and the
    /// data length matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(CoreError::shape(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::shape(
                "tensor",
                format!("shape {shape:?} wants {numel} scalars, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(x: E) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![x],
            requires_grad: false,
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(CoreError::usage(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Splits a shape into (leading batch extents, rows, cols) for ops that
/// act on the last two axes.
pub(crate) fn split_matrix_shape(shape: &[usize]) -> Option<(&[usize], usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let (batch, mat) = shape.split_at(shape.len() - 2);
    Some((batch, mat[0], mat[1]))
}
