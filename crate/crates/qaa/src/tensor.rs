//! Dense n-dimensional tensors.
//!
//! Storage is `f32`; every numeric kernel in the crate is generic over
//! [`Scalar`] so the same code path can run in an `f64` verification mode
//! (gradient checks and acceptance tests). All reductions in the crate use a
//! fixed summation order, so results are bit-reproducible run to run.

use crate::error::{Error, Result};

/// Element type abstraction for the compute kernels.
///
/// `f32` is the storage and training type; `f64` is the verification type.
/// `round` on both types rounds half away from zero, which is the rounding
/// rule the quantizer contracts require.
pub trait Scalar:
    num_traits::Float + core::fmt::Debug + core::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    // named to avoid clashing with `num_traits::ToPrimitive`
    fn into_f32(self) -> f32;
    fn into_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f32(self) -> f32 {
        self
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f32(self) -> f32 {
        self as f32
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Dense tensor with row-major storage.
///
/// Invariant: `product(shape) == data.len()`. Enforced by every constructor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// The storage-precision tensor used at module boundaries.
pub type Tensor = TensorBase<f32>;

impl<S: Scalar> TensorBase<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        TensorBase {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        TensorBase {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(TensorBase {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: S) -> Self {
        TensorBase {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the tensor with a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    /// Rejects NaN/Inf entries; `context` names the boundary for the error.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericFault {
                context: context.to_string(),
            })
        }
    }

    /// Converts the element type; f32 -> f64 is exact.
    pub fn cast<T: Scalar>(&self) -> TensorBase<T> {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.into_f64())).collect(),
        }
    }

    /// Max-norm of the elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> S {
        debug_assert_eq!(self.shape, other.shape);
        let mut m = S::zero();
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = (*a - *b).abs();
            if d > m {
                m = d;
            }
        }
        m
    }

    /// Fixed-order sum of squares (used by norms), accumulated in f64.
    pub fn sum_sq_f64(&self) -> f64 {
        let mut acc = 0.0f64;
        for v in &self.data {
            let x = v.into_f64();
            acc += x * x;
        }
        acc
    }
}

impl Tensor {
    /// Bitwise equality, distinguishing NaN payloads and signed zeros.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(TensorBase::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(TensorBase::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn finite_check_rejects_nan_and_inf() {
        let t = Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
        let t = Tensor::from_vec(&[2], vec![1.0, f32::INFINITY]).unwrap();
        assert!(t.check_finite("test").is_err());
        let t = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        assert!(t.check_finite("test").is_ok());
    }

    #[test]
    fn cast_f32_to_f64_is_exact() {
        let t = Tensor::from_vec(&[3], vec![0.1, -2.5, 3.75]).unwrap();
        let d: TensorBase<f64> = t.cast();
        for (a, b) in t.data().iter().zip(d.data().iter()) {
            assert_eq!(*a as f64, *b);
        }
    }

    #[test]
    fn rounding_is_ties_away_from_zero() {
        // The quantizer contract depends on this stdlib behavior.
        assert_eq!(0.5f32.round(), 1.0);
        assert_eq!((-0.5f32).round(), -1.0);
        assert_eq!(1.5f32.round(), 2.0);
        assert_eq!(2.5f64.round(), 3.0);
        assert_eq!((-2.5f64).round(), -3.0);
    }
}
