//! Dense NCHW tensors with a tape-based reverse-mode autodiff.
//!
//! Every differentiable operation is recorded on a [`Graph`] as a node that
//! owns its output value and an [`Op`] able to map the output gradient back
//! to its inputs. [`Graph::backward`] walks the nodes in reverse execution
//! order. Layers outside this module (normalization, losses) add their own
//! fused operations by implementing [`Op`].

pub mod gradcheck;
mod graph;
mod ops;
mod optim;
mod param;
mod scalar;

pub use graph::{Graph, Op, Var};
pub use optim::{Adam, AdamConfig};
pub use param::{Binder, ParamId, ParamStore};
pub use ops::conv_output_size;
pub use scalar::{matmul, Scalar};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch, channel, height and width extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// `rows × cols` matrix stored as `(rows, cols, 1, 1)`.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape::new(rows, cols, 1, 1)
    }

    /// Per-channel vector stored as `(1, len, 1, 1)`.
    pub const fn vector(len: usize) -> Self {
        Shape::new(1, len, 1, 1)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per sample, i.e. the flattened row length.
    pub const fn row_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.numel() == 0
    }

    pub(crate) fn require_nonempty(&self, op: &'static str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::shape(op, format!("empty tensor {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major NCHW array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::shape("set_grad", "gradient length differs from data"));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Flattened row of sample `n`.
    pub fn row(&self, n: usize) -> &[T] {
        let len = self.shape.row_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape("reshape", format!("{} -> {shape}", self.shape)));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Rows `indices` of the batch, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let len = self.shape.row_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.shape.n {
                return Err(Error::invalid(format!("row {i} out of {}", self.shape.n)));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_vec(
            Shape::new(indices.len(), self.shape.c, self.shape.h, self.shape.w),
            data,
        )
    }

    /// Stacks equally shaped batches along `n`.
    pub fn stack_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack_rows of zero tensors"))?
            .shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::shape("stack_rows", format!("{s} vs {first}")));
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(Shape::new(n, first.c, first.h, first.w), data)
    }
}
