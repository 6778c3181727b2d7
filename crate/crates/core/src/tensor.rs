use crate::error::{Error, Result};
use crate::real::Real;

/// Dense row-major tensor. The last axis is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![R::zero(); numel(shape)] }
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: R) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> R) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| S::of(v.as_f64())).collect() }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> R {
        self.data[0]
    }

    /// Size in bytes of the value buffer.
    pub fn bytes(&self) -> usize {
        self.data.len() * R::BYTES
    }
}
