//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! [`Tensor`] is an immutable value; all differentiable computation goes
//! through a [`Graph`], which records primitive applications and replays
//! them backwards in [`Graph::backward`]. Parameters that are frozen are
//! inserted as constants and therefore never reach the tape.
//!
//! A tensor may also be a *meta* tensor: it carries a shape but no data.
//! Every primitive infers its output shape before computing, so running a
//! forward pass on meta inputs yields exact shapes and node counts without
//! touching any numbers. Parameter and activation accounting for models
//! far too large to materialize rely on this.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};

pub use gradcheck::{grad_check, GradCheckReport, ScalarFn};
pub use graph::{AttrValue, Attrs, Gradients, Graph, Op, Var};

/// Element type of a tensor.
pub trait Real:
    Float
    + FromPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn erf(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {shapes:?}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },
    #[error("unknown primitive '{0}'")]
    UnknownPrimitive(String),
    #[error("{op}: missing or invalid attribute '{attr}'")]
    BadAttr { op: String, attr: String },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("cannot differentiate through meta tensors")]
    MetaBackward,
    #[error("non-finite value at coordinate {index} during gradient check")]
    NonFinite { index: usize },
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub(crate) fn mismatch(
    op: &'static str,
    shapes: &[&[usize]],
    detail: impl Into<String>,
) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        detail: detail.into(),
    }
}

/// Dense real array in row-major order, or a data-less meta tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Option<Arc<[T]>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Some(data.into()),
        })
    }

    /// Builds a tensor whose length is known to match; internal kernels only.
    pub(crate) fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Some(data.into()),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(Vec::new(), vec![value])
    }

    pub fn meta(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_meta(&self) -> bool {
        self.data.is_none()
    }

    /// Values in row-major order; empty for meta tensors.
    pub fn data(&self) -> &[T] {
        self.data.as_deref().unwrap_or(&[])
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().to_vec()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(mismatch("reshape", &[&self.shape, shape], "element count differs"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        match &self.data {
            Some(d) => Self::from_vec(self.shape.clone(), d.iter().map(|&v| f(v)).collect()),
            None => self.clone(),
        }
    }

    pub fn item(&self) -> Option<T> {
        (self.numel() == 1).then(|| self.data().first().copied()).flatten()
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape || self.is_meta() || other.is_meta() {
            return None;
        }
        Some(
            self.data()
                .iter()
                .zip(other.data())
                .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())),
        )
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .as_ref()
                .map(|d| d.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect()),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.data {
            None => write!(f, "Tensor(meta, shape={:?})", self.shape),
            Some(d) if d.len() <= 16 => write!(f, "Tensor(shape={:?}, {:?})", self.shape, d),
            Some(d) => write!(
                f,
                "Tensor(shape={:?}, [{:?}, {:?}, ... {} values])",
                self.shape,
                d[0],
                d[1],
                d.len()
            ),
        }
    }
}
