//! Dense row-major arrays and a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain value type. Differentiable computations are recorded
//! on a [`Tape`], which hands out [`Var`] handles; [`Tape::backward`] walks the
//! recorded nodes in reverse creation order, which is a valid reverse
//! topological order because every node only refers to earlier nodes.
//!
//! Everything is generic over [`Scalar`] so that the pipeline runs in `f32`
//! while gradient checks can replay the same code in `f64`.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub use gradcheck::{central_difference, grad_check};
pub use kernels::matmul_into;
pub use tape::{Grads, Tape, Var};

/// Floating-point element type.
pub trait Scalar:
    Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense array with a row-major layout. An empty shape denotes a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new([rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a tensor viewed as `[rows, last]`.
    pub fn row(&self, i: usize) -> &[S] {
        let n = *self.shape.last().unwrap_or(&1);
        &self.data[i * n..(i + 1) * n]
    }

    /// 2-D matrix product without recording anything.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = dims2("matmul", &self.shape)?;
        let (k2, n) = dims2("matmul", &rhs.shape)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}: inner extents differ", self.shape, rhs.shape),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new([m, n], out)
    }
}

pub(crate) fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::shape(op, format!("expected a 2-D tensor, got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_extents() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([0, 3], vec![]).is_err());
        let s = Tensor::scalar(3.0f32);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 3.0);
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::<f32>::from_fn([2, 3], |i| i as f32);
        let r = t.clone().reshape([3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape([4, 2]).is_err());
    }

    #[test]
    fn plain_matmul_matches_hand_expansion() {
        let a = Tensor::from_rows(&[&[1.0f32, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0f32, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }
}
