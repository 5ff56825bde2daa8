//! Dense N-dimensional tensors with reverse-mode gradients.
//!
//! The engine supports exactly the operator set the segmentation network
//! needs: grouped/strided 3D convolution and its transpose, group
//! normalization, GELU, trilinear resizing, and the elementwise/reduction
//! glue (add, mul, sum, mean, softmax) required to express losses.
//!
//! Activations use the canonical N×C×D×H×W layout; convolution kernels use
//! Cout×Cin/g×kd×kh×kw (Cin×Cout/g×k³ for transposed kernels). Buffers are
//! row-major. Every operation records a backward closure when gradients are
//! enabled and any input participates in differentiation; `backward` on a
//! scalar loss walks that graph in reverse topological order.
//!
//! Determinism: every reduction uses a fixed summation order independent of
//! thread count, so repeated runs are bitwise identical. Parallelism only
//! splits work across independent output elements.

mod autograd;
mod conv;
mod norm;
mod ops;
mod resize;

pub use autograd::{no_grad, Gradients};
pub use conv::{conv3d, conv3d_transposed, ConvSpec, OutputAlignment};
pub use norm::group_norm;
pub use resize::trilinear_resize;

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};

/// Element type of a tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => write!(f, "float32"),
            DType::F64 => write!(f, "float64"),
        }
    }
}

/// Owned, row-major element storage.
#[derive(Clone, Debug)]
pub enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buffer {
    pub fn dtype(&self) -> DType {
        match self {
            Buffer::F32(_) => DType::F32,
            Buffer::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, len: usize) -> Buffer {
        match dtype {
            DType::F32 => Buffer::F32(vec![0.0; len]),
            DType::F64 => Buffer::F64(vec![0.0; len]),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Buffer::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Buffer::F64(v) => v.clone(),
        }
    }

    pub fn from_f64_slice(dtype: DType, values: &[f64]) -> Buffer {
        match dtype {
            DType::F32 => Buffer::F32(values.iter().map(|&x| x as f32).collect()),
            DType::F64 => Buffer::F64(values.to_vec()),
        }
    }

    /// Bit-level equality; distinguishes NaN payloads and signed zeros.
    pub fn bits_eq(&self, other: &Buffer) -> bool {
        match (self, other) {
            (Buffer::F32(a), Buffer::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Buffer::F64(a), Buffer::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// In-place `self += other`, which must match in dtype and length.
    pub(crate) fn add_assign(&mut self, other: &Buffer) {
        match (self, other) {
            (Buffer::F32(a), Buffer::F32(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            (Buffer::F64(a), Buffer::F64(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            _ => panic!("dtype mismatch in gradient accumulation"),
        }
    }
}

/// Scalar types a tensor can hold. Sealed to `f32` and `f64`.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn into_buffer(v: Vec<Self>) -> Buffer;
    fn slice(buf: &Buffer) -> &[Self];
    fn slice_mut(buf: &mut Buffer) -> &mut [Self];
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn into_buffer(v: Vec<Self>) -> Buffer {
        Buffer::F32(v)
    }
    fn slice(buf: &Buffer) -> &[Self] {
        match buf {
            Buffer::F32(v) => v,
            Buffer::F64(_) => panic!("expected f32 buffer"),
        }
    }
    fn slice_mut(buf: &mut Buffer) -> &mut [Self] {
        match buf {
            Buffer::F32(v) => v,
            Buffer::F64(_) => panic!("expected f32 buffer"),
        }
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn into_buffer(v: Vec<Self>) -> Buffer {
        Buffer::F64(v)
    }
    fn slice(buf: &Buffer) -> &[Self] {
        match buf {
            Buffer::F64(v) => v,
            Buffer::F32(_) => panic!("expected f64 buffer"),
        }
    }
    fn slice_mut(buf: &mut Buffer) -> &mut [Self] {
        match buf {
            Buffer::F64(v) => v,
            Buffer::F32(_) => panic!("expected f64 buffer"),
        }
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Run `body` once for each dtype-dispatched element type.
macro_rules! dispatch_dtype {
    ($dtype:expr, $T:ident, $body:block) => {
        match $dtype {
            $crate::tensor::DType::F32 => {
                type $T = f32;
                $body
            }
            $crate::tensor::DType::F64 => {
                type $T = f64;
                $body
            }
        }
    };
}
pub(crate) use dispatch_dtype;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

pub(crate) fn push_no_grad() {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
}

pub(crate) fn pop_no_grad() {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
}

/// Backward rule of one recorded operation: given the output gradient and the
/// parent tensors, produce one gradient buffer per parent (None when the
/// parent's gradient is not needed).
pub(crate) type BackwardFn =
    Box<dyn Fn(&Buffer, &[Tensor], &[bool]) -> Vec<Option<Buffer>> + Send + Sync>;

pub(crate) struct Node {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    dtype: DType,
    data: RwLock<Buffer>,
    grad: Mutex<Option<Buffer>>,
    requires_grad: AtomicBool,
    node: Option<Node>,
}

/// Shared handle to a dense tensor; clones are cheap and alias the storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, dtype={}, requires_grad={})",
            self.inner.id,
            self.inner.shape,
            self.inner.dtype,
            self.requires_grad()
        )
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Config(format!("all extents must be >= 1, got {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::Config(format!(
            "shape {shape:?} implies {numel} elements, buffer holds {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Buffer, requires_grad: bool, node: Option<Node>) -> Tensor {
        let dtype = data.dtype();
        Tensor {
            inner: Arc::new(TensorInner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                dtype,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad: AtomicBool::new(requires_grad),
                node,
            }),
        }
    }

    /// Leaf tensor from an owned buffer.
    pub fn from_buffer(shape: &[usize], data: Buffer) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::from_parts(shape.to_vec(), data, false, None))
    }

    pub fn from_vec_f32(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Tensor::from_buffer(shape, Buffer::F32(data))
    }

    pub fn from_vec_f64(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_buffer(shape, Buffer::F64(data))
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), Buffer::zeros(dtype, numel), false, None)
    }

    pub fn full(shape: &[usize], dtype: DType, value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let buf = match dtype {
            DType::F32 => Buffer::F32(vec![value as f32; numel]),
            DType::F64 => Buffer::F64(vec![value; numel]),
        };
        Tensor::from_parts(shape.to_vec(), buf, false, None)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::full(shape, dtype, 1.0)
    }

    pub fn scalar(dtype: DType, value: f64) -> Tensor {
        Tensor::full(&[1], dtype, value)
    }

    /// Operation result. Records the graph node only when gradients are
    /// enabled and some parent participates in differentiation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Buffer,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let record = grad_enabled() && parents.iter().any(|p| p.participates());
        if record {
            Tensor::from_parts(shape, data, false, Some(Node { parents, backward }))
        } else {
            Tensor::from_parts(shape, data, false, None)
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.load(Ordering::Relaxed)
    }

    /// Mark or unmark this tensor as a differentiation leaf.
    pub fn set_requires_grad(&self, flag: bool) -> &Tensor {
        self.inner.requires_grad.store(flag, Ordering::Relaxed);
        self
    }

    /// Builder-style variant of [`set_requires_grad`](Tensor::set_requires_grad).
    pub fn requiring_grad(self) -> Tensor {
        self.set_requires_grad(true);
        self
    }

    /// True when this tensor is part of a gradient computation, either as a
    /// marked leaf or as the result of an operation on one.
    pub(crate) fn participates(&self) -> bool {
        self.requires_grad() || self.inner.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    /// True when this tensor was created directly rather than by an
    /// operation that recorded a graph node.
    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Read access to the underlying buffer.
    pub fn with_data<R>(&self, f: impl FnOnce(&Buffer) -> R) -> R {
        let guard = self.inner.data.read().expect("tensor lock poisoned");
        f(&guard)
    }

    /// Mutable access to the underlying buffer (parameter updates, loading).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut Buffer) -> R) -> R {
        let mut guard = self.inner.data.write().expect("tensor lock poisoned");
        f(&mut guard)
    }

    pub fn data_clone(&self) -> Buffer {
        self.with_data(|b| b.clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.with_data(|b| b.to_f64_vec())
    }

    /// Value of a single-element tensor.
    pub fn item_f64(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() requires a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.to_f64_vec()[0])
    }

    /// Overwrite the data buffer in place; shape and dtype must match.
    pub fn copy_from(&self, src: &Tensor) -> Result<()> {
        if self.shape() != src.shape() {
            return Err(Error::Config(format!(
                "copy_from shape mismatch: {:?} vs {:?}",
                self.shape(),
                src.shape()
            )));
        }
        if self.dtype() != src.dtype() {
            return Err(Error::Config(format!(
                "copy_from dtype mismatch: {} vs {}",
                self.dtype(),
                src.dtype()
            )));
        }
        let data = src.data_clone();
        self.with_data_mut(|dst| *dst = data);
        Ok(())
    }

    /// Replace the buffer with new contents of identical shape and dtype.
    pub fn set_data(&self, data: Buffer) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Config(format!(
                "set_data length mismatch: tensor has {} elements, buffer {}",
                self.numel(),
                data.len()
            )));
        }
        if data.dtype() != self.dtype() {
            return Err(Error::Config(format!(
                "set_data dtype mismatch: {} vs {}",
                self.dtype(),
                data.dtype()
            )));
        }
        self.with_data_mut(|dst| *dst = data);
        Ok(())
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Buffer> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn grad_to_f64_vec(&self) -> Option<Vec<f64>> {
        self.grad().map(|b| b.to_f64_vec())
    }

    /// Drop the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &Buffer) {
        let mut guard = self.inner.grad.lock().expect("grad lock poisoned");
        match guard.as_mut() {
            Some(existing) => existing.add_assign(contribution),
            None => *guard = Some(contribution.clone()),
        }
    }

    /// Leaf copy of this tensor's current values, detached from the graph.
    pub fn detached(&self) -> Tensor {
        Tensor::from_parts(self.inner.shape.clone(), self.data_clone(), false, None)
    }

    /// Cast to another dtype, producing a detached leaf.
    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.detached();
        }
        let values = self.to_f64_vec();
        let buf = Buffer::from_f64_slice(dtype, &values);
        Tensor::from_parts(self.inner.shape.clone(), buf, false, None)
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.with_data(|b| match b {
            Buffer::F32(v) => v.iter().all(|x| x.is_finite()),
            Buffer::F64(v) => v.iter().all(|x| x.is_finite()),
        })
    }

    /// Bitwise data equality (shape, dtype, and element bits).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self.with_data(|a| other.with_data(|b| a.bits_eq(b)))
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
