//! Shaped real-valued arrays in row-major order.
//!
//! `Tensor` is the carrier for images, activations and parameters. Training
//! runs at `f32`; gradient checking instantiates the same code at `f64`.

use num_traits::{Float, FromPrimitive};
use std::fmt;

use crate::error::{Error, Result};

/// Scalar element type for all numeric code in this crate.
pub trait Scalar:
    Float + FromPrimitive + fmt::Debug + fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    fn from_real(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to scalar")
    }
    fn to_real(self) -> f64;
}

impl Scalar for f32 {
    fn to_real(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_real(self) -> f64 {
        self
    }
}

/// Identifier of a value recorded on a [`crate::autodiff::Tape`]. Carries
/// the owning tape's uid so a tensor from one tape is treated as a constant
/// leaf by any other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// Shaped array with flat row-major storage.
///
/// Invariants: `data.len()` equals the product of `shape`, and every element
/// of a tensor returned by a completed operation is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad_enabled: bool,
    /// Set when this tensor was produced by a tape-recorded operation.
    pub(crate) node: Option<NodeId>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch {
                context: "tensor construction".into(),
                detail: format!("shape {:?} wants {} elements, got {}", shape, expect, data.len()),
            });
        }
        Ok(Tensor { shape, data, grad_enabled: false, node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); n], grad_enabled: false, node: None }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![F::one(); n], grad_enabled: false, node: None }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![], data: vec![v], grad_enabled: false, node: None }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        Self::new(shape, data)
    }

    pub fn with_grad(mut self, enabled: bool) -> Self {
        self.grad_enabled = enabled;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                context: "item".into(),
                detail: format!("expected scalar, got shape {:?}", self.shape),
            })
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.into() })
        }
    }

    /// Reinterpret the flat storage under a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone()).map(|t| t.with_grad(self.grad_enabled))
    }

    /// Convert elements to another scalar type (used to lift f32 cases to f64
    /// for gradient checking).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_real(v.to_real())).collect(),
            grad_enabled: self.grad_enabled,
            node: None,
        }
    }

    /// Row view of a 2-d tensor.
    pub fn row(&self, i: usize) -> &[F] {
        debug_assert_eq!(self.ndim(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub(crate) fn detached(&self) -> Self {
        let mut t = self.clone();
        t.node = None;
        t
    }
}

impl<F: Scalar> fmt::Display for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

/// Dot product of two equal-length slices. Eight fixed-order accumulator
/// lanes keep the reduction deterministic while letting it vectorize.
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [F::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (xa, xb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] = lanes[l] + xa[l] * xb[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let quad = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (quad[0] + quad[2]) + (quad[1] + quad[3]) + tail
}

/// L2 norm of a slice.
pub fn l2_norm<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_item() {
        let t = Tensor::scalar(2.5f64);
        assert!(t.is_scalar());
        assert_eq!(t.item().unwrap(), 2.5);
    }

    #[test]
    fn finite_check() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(!t.all_finite());
        assert!(t.ensure_finite("test").is_err());
    }

    #[test]
    fn cast_roundtrip() {
        let t = Tensor::<f32>::new(vec![3], vec![1.0, -2.5, 0.125]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t.data(), back.data());
    }
}
