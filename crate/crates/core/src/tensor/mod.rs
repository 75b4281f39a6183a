//! Dense N×C×H×W tensors and a tape-based reverse-mode differentiation engine.
//!
//! Every value the network touches is a 4-d [`Tensor`]. Forward computations
//! are recorded on a [`Tape`]; [`Tape::backward`] replays the record in
//! reverse and leaves a gradient on every node that depends on a leaf created
//! with `requires_grad`.
//!
//! The engine is generic over the element type. `f32` is the training
//! precision; `f64` is the verification precision used by the gradient
//! checker.

mod gemm;
pub mod gradcheck;
mod kernels;
mod tape;

use std::fmt;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, GradGraph, LeafReport, Sampling};
pub use tape::{BatchStats, BnMode, PoolMode, ResampleMode, Tape, Var};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of a tensor.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static + std::iter::Sum
{
    /// `c = a·b (+ c if accumulate)` on strided row/column matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("float converts")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardConsumed,
    #[error("backward needs a scalar output, got shape {0}")]
    NotScalar(Shape),
    #[error("graph is not deterministic: two evaluations at the same point differ ({0} vs {1})")]
    NonDeterministic(f64, f64),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, detail: detail.into() }
}

/// (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major element strides.
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}×{c}×{h}×{w}")
    }
}

/// A dense row-major N×C×H×W array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(shape_err(
                "tensor",
                format!("{} values do not fill shape {shape} ({} elements)", data.len(), shape.numel()),
            ));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()], grad: None, requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the values. Tensors recorded on a tape are owned by
    /// the tape, so this can never alias a value that backward will replay.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        let s = self.shape.strides();
        self.data[idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] + idx[3]]
    }

    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(shape_err("reshape", format!("cannot view {} as {shape}", self.shape)));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    /// Resized copy of the H×W planes, on the same grid as [`Tape::resample`].
    pub fn resized(&self, target: (usize, usize), mode: ResampleMode) -> Result<Tensor<T>> {
        if target.0 == 0 || target.1 == 0 || self.numel() == 0 {
            return Err(invalid("resize", format!("cannot resize {} to {}×{}", self.shape, target.0, target.1)));
        }
        let data = match mode {
            ResampleMode::Nearest => kernels::nearest(&self.data, self.shape, target),
            ResampleMode::Bilinear => kernels::bilinear(&self.data, self.shape, target),
        };
        Tensor::from_vec(Shape::new(self.shape.n(), self.shape.c(), target.0, target.1), data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }
}
