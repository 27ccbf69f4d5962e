//! Dense rank-4 tensors (batch, channel, height, width) and reverse-mode
//! automatic differentiation over the fixed operation set needed by the
//! models in this crate.

pub mod grad_check;
pub mod ops;
pub mod tape;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// (N, C, H, W) extents of a rank-4 tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Row-major flat index.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Identity assigned at creation. Clones share the id: a clone is the
/// same logical tensor (same data), so it enrolls as the same tape leaf.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(u64);

fn next_tensor_id() -> TensorId {
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    TensorId(COUNTER.fetch_add(1, Ordering::Relaxed))
}

/// Immutable rank-4 array of scalars. Cheap to clone (data is shared).
#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    id: TensorId,
    shape: Shape,
    data: Arc<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "data length {} does not match shape {} ({} elements)",
                    data.len(),
                    shape,
                    shape.numel()
                ),
            ));
        }
        Ok(Tensor {
            id: next_tensor_id(),
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn filled(shape: Shape, value: S) -> Self {
        Tensor {
            id: next_tensor_id(),
            shape,
            data: Arc::new(vec![value; shape.numel()]),
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> S) -> Self {
        let data = (0..shape.numel()).map(&mut f).collect();
        Tensor {
            id: next_tensor_id(),
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    /// Scalar carrier: shape (1,1,1,1).
    pub fn scalar(value: S) -> Self {
        Self::filled(Shape::new(1, 1, 1, 1), value)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    #[inline]
    pub fn id(&self) -> TensorId {
        self.id
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    /// Copy-on-write mutable access. Used by the optimizer; if the data
    /// is shared (e.g. a tape still holds it) the buffer is cloned first,
    /// so existing views keep their values.
    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn map(&self, mut f: impl FnMut(S) -> S) -> Tensor<S> {
        Tensor::from_fn(self.shape, |i| f(self.data[i]))
    }

    /// Clamp every element into [0, 1]; images between pipeline stages.
    pub fn clamp01(&self) -> Tensor<S> {
        self.map(|v| v.max(S::zero()).min(S::one()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |m, d| m.max(d))
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }
}
