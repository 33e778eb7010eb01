//! Dense `f64` tensors with a dynamic reverse-mode tape.
//!
//! Every [`Tensor`] is an immutable, reference-counted buffer. Operations on
//! tensors that require gradients record a node holding their parents and a
//! backward closure; [`backward`] walks those nodes in reverse topological
//! order. The tape is rebuilt on every forward pass, so shapes (and attention
//! masks) are free to change between calls.

mod linalg;
mod nn;
mod ops;
mod shape;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use nn::{fourier_features, sinusoidal_embedding, MASK_NEG};

/// Errors raised by tensor operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("mask entry {value} is neither 0 nor the -inf sentinel")]
    InvalidMask { value: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardFn = dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    // (grad_out, out_data) -> one optional gradient per parent
    backward: Box<BackwardFn>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<Node>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// A dense row-major tensor of `f64` values.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CORRUPT_OP: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Runs `f` without recording any tape nodes.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Test hook: while the returned guard is alive, gradients produced by the
/// named op are scaled by `1.001` so gradient checks can be shown to fail.
pub fn corrupt_gradient(op: &'static str) -> CorruptGuard {
    let prev = CORRUPT_OP.with(|c| c.replace(Some(op)));
    CorruptGuard { prev }
}

pub struct CorruptGuard {
    prev: Option<&'static str>,
}

impl Drop for CorruptGuard {
    fn drop(&mut self) {
        CORRUPT_OP.with(|c| c.set(self.prev));
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
            grad: RefCell::new(None),
        }))
    }

    /// Creates a constant tensor that does not participate in the tape.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    /// Creates a leaf tensor whose gradient is accumulated by [`backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::make(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::make(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::make(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::make(vec![value], vec![1], false, None)
    }

    /// Builds the output of an operation, attaching a tape node when any
    /// parent requires a gradient and recording is enabled.
    pub(crate) fn from_op<F>(
        data: Vec<f64>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Tensor
    where
        F: Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            let node = Node {
                op,
                parents,
                backward: Box::new(backward),
            };
            Self::make(data, shape, true, Some(node))
        } else {
            Self::make(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The op that produced this tensor, or `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// First element; intended for scalar-shaped tensors.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A copy of this tensor cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Self::make(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Extent of `axis`, accepting negative indices from the end.
    pub fn dim(&self, axis: isize) -> usize {
        let r = self.rank() as isize;
        let a = if axis < 0 { r + axis } else { axis };
        self.0.shape[a as usize]
    }

    pub(crate) fn norm_axis(&self, op: &'static str, axis: isize) -> Result<usize> {
        let r = self.rank() as isize;
        let a = if axis < 0 { r + axis } else { axis };
        if a < 0 || a >= r {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("axis {axis} out of range for rank {r}"),
            });
        }
        Ok(a as usize)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

/// Gradients of every leaf reached by one backward pass, keyed by tensor id.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|g| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (tensor, parents already pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.0.node {
            for p in node.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn accumulate(slot: &mut Vec<f64>, add: &[f64]) {
    for (s, a) in slot.iter_mut().zip(add) {
        *s += a;
    }
}

/// Reverse-mode sweep from a scalar `loss`.
///
/// Leaf gradients are added into each leaf's stored gradient, so repeated
/// calls accumulate until [`Tensor::zero_grad`] is called.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    let mut out = Gradients::default();
    if !loss.requires_grad() {
        return Ok(out);
    }
    let corrupt = CORRUPT_OP.with(|c| c.get());
    let order = topo_order(loss);
    let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
    pending.insert(loss.id(), vec![1.0]);
    for t in order.iter().rev() {
        let Some(g) = pending.remove(&t.id()) else {
            continue;
        };
        match &t.0.node {
            Some(node) => {
                let parent_grads = (node.backward)(&g, &t.0.data);
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(mut pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    if corrupt == Some(node.op) {
                        pg.iter_mut().for_each(|v| *v *= 1.001);
                    }
                    match pending.get_mut(&p.id()) {
                        Some(slot) => accumulate(slot, &pg),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            None => {
                let mut stored = t.0.grad.borrow_mut();
                match stored.as_mut() {
                    Some(s) => accumulate(s, &g),
                    None => *stored = Some(g.clone()),
                }
                out.grads.insert(t.id(), g);
            }
        }
    }
    Ok(out)
}
