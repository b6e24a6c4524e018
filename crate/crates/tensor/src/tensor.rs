use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static DETECT_ANOMALY: Cell<bool> = const { Cell::new(false) };
    static ANOMALY: RefCell<Option<String>> = const { RefCell::new(None) };
    static FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Whether newly created operations are recorded on the graph.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode when dropped.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn new(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        GradModeGuard { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` without recording any operation.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard::new(false);
    f()
}

/// Enables the non-finite check on every forward operation of this thread.
/// The first offending operation is remembered and reported by
/// [`grad`](crate::grad) and [`take_anomaly`].
pub fn set_detect_anomaly(on: bool) {
    DETECT_ANOMALY.with(|d| d.set(on));
}

pub fn take_anomaly() -> Option<String> {
    ANOMALY.with(|a| a.borrow_mut().take())
}

/// Corrupts the backward pass of the named primitive on this thread.
/// Used to check that the gradient checker catches broken kernels.
#[doc(hidden)]
pub fn set_fault_injection(op: Option<&'static str>) {
    FAULT.with(|f| f.set(op));
}

pub(crate) fn fault_active(op: &str) -> bool {
    FAULT.with(|f| f.get() == Some(op))
}

/// Context handed to [`BackwardOp::backward`].
pub struct BackwardCtx<'a, T: Scalar> {
    pub inputs: &'a [Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

impl<T: Scalar> BackwardCtx<'_, T> {
    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// Implementations express the product with tensor operations so that, when
/// the backward pass runs with grad mode enabled, the gradient is itself a
/// differentiable graph.
pub trait BackwardOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Box<dyn BackwardOp<T>>,
    pub(crate) inputs: Vec<Tensor<T>>,
}

pub(crate) struct Inner<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) node: Option<Node<T>>,
}

impl<T: Scalar> Drop for Inner<T> {
    // Unrolled windows produce deep graphs; release them iteratively.
    fn drop(&mut self) {
        let Some(node) = self.node.take() else {
            return;
        };
        let mut stack = node.inputs;
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.inner) {
                if let Some(n) = inner.node.take() {
                    stack.extend(n.inputs);
                }
            }
        }
    }
}

/// Dense row-major array that may be a node of a differentiable graph.
///
/// Cloning is cheap: the value buffer and graph node are shared.
pub struct Tensor<T: Scalar = f64> {
    pub(crate) inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.inner.requires_grad);
        if let Some(node) = &self.inner.node {
            d.field("op", &node.op.name());
        }
        if self.numel() <= 16 {
            d.field("data", &self.data());
        }
        d.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn leaf(data: Arc<Vec<T>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                node: None,
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::invalid(
                "from_vec",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        if numel_of(shape) != data.len() {
            return Err(TensorError::invalid(
                "from_vec",
                format!("shape {shape:?} needs {} values, got {}", numel_of(shape), data.len()),
            ));
        }
        Ok(Self::leaf(Arc::new(data), shape.to_vec(), false))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::from_f64_lossy(v)).collect(), shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(Arc::new(vec![value; numel_of(shape)]), shape.to_vec(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Zero-dimensional tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Name of the operation that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op.name())
    }

    /// A new leaf sharing this tensor's values and tracking gradients.
    pub fn requires_grad_leaf(&self) -> Self {
        Self::leaf(Arc::clone(&self.inner.data), self.inner.shape.clone(), true)
    }

    /// A new leaf sharing this tensor's values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(Arc::clone(&self.inner.data), self.inner.shape.clone(), false)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Builds the output of an operation, recording it when grad mode is on
    /// and any input participates in a graph.
    pub(crate) fn record(
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: &[&Tensor<T>],
        op: impl BackwardOp<T> + 'static,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len(), "{}", op.name());
        if DETECT_ANOMALY.with(|d| d.get()) {
            let bad_input = inputs.iter().position(|t| !t.all_finite());
            let bad_output = !data.iter().all(|v| v.is_finite());
            if bad_input.is_some() || bad_output {
                let msg = match bad_input {
                    Some(i) => format!("{} (input {i})", op.name()),
                    None => format!("{} (output)", op.name()),
                };
                ANOMALY.with(|a| {
                    let mut a = a.borrow_mut();
                    if a.is_none() {
                        *a = Some(msg);
                    }
                });
            }
        }
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = track.then(|| Node {
            op: Box::new(op),
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data: Arc::new(data),
                requires_grad: track,
                node,
            }),
        }
    }

    /// Output that shares the input's buffer (reshape).
    pub(crate) fn record_shared(
        data: Arc<Vec<T>>,
        shape: Vec<usize>,
        inputs: &[&Tensor<T>],
        op: impl BackwardOp<T> + 'static,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = track.then(|| Node {
            op: Box::new(op),
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad: track,
                node,
            }),
        }
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.inner.data)
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }
}
