//! Minimal dense-tensor arithmetic with tape-based reverse-mode differentiation.
//!
//! Tensors are immutable row-major `f64` buffers recorded on a [`Tape`].
//! Operations evaluate eagerly and push a node (value + backward closure)
//! onto the tape; [`Tape::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products into per-node gradient slots.
//!
//! Every differentiable operation in the crate is registered through
//! [`Tape::push`] — including the fused rasterization and bilinear-sampling
//! kernels that live in other modules. Each op's output is scanned for
//! non-finite values at record time; the first offender poisons the tape
//! with a diagnostic naming the operation, surfaced by [`Tape::forward_eval`]
//! or [`Tape::backward`].
//!
//! Scope: first-order gradients over a static per-step graph. Graph
//! construction and the backward walk are single-threaded; individual
//! kernels may be data-parallel internally as long as each output element
//! is produced by a fixed-order reduction.

pub mod gradcheck;
pub mod ops;

pub use gradcheck::{finite_diff_check, FdOptions, FdReport};

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("op `{op}` (node {node}) produced a non-finite value: {detail}")]
    Poisoned {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

/// Backward rule of a recorded op: takes the upstream gradient of the op's
/// output and accumulates contributions into parent slots via [`GradSink`].
///
/// Closures must capture node ids and saved `Arc` values only — never a
/// [`Tensor`] handle, which would create a reference cycle with the tape.
pub type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    value: Arc<Vec<f64>>,
    op: &'static str,
    backward: Option<BackwardFn>,
}

struct Poison {
    op: &'static str,
    node: usize,
    detail: String,
}

struct TapeInner {
    nodes: Vec<Node>,
    poison: Option<Poison>,
}

/// Recording tape for one forward/backward step. Cheap to clone (shared).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                poison: None,
            })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a node. This is the single registration point for all ops.
    ///
    /// `requires_grad` should be the OR over parents (leaves pass their own
    /// flag); when it is false the backward closure is dropped so inference
    /// passes skip gradient bookkeeping entirely.
    pub fn push(
        &self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            value.len(),
            "op `{op}`: shape {shape:?} does not match buffer length {}",
            value.len()
        );
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.poison.is_none() {
            if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
                inner.poison = Some(Poison {
                    op,
                    node: id,
                    detail: format!("element {bad} is {}", value[bad]),
                });
            }
        }
        let requires_grad = requires_grad && backward.is_some();
        let value = Arc::new(value);
        inner.nodes.push(Node {
            value: Arc::clone(&value),
            op,
            backward: if requires_grad { backward } else { None },
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
            requires_grad,
            value,
        }
    }

    /// Record a poison event from inside an op kernel (e.g. a conditioning
    /// failure that does not show up as a NaN). First event wins.
    pub fn poison(&self, op: &'static str, node: usize, detail: String) {
        let mut inner = self.inner.borrow_mut();
        if inner.poison.is_none() {
            inner.poison = Some(Poison { op, node, detail });
        }
    }

    /// Leaf with gradient tracking controlled by the caller.
    pub fn leaf(&self, value: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, value.len(), "leaf shape/buffer mismatch");
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let value = Arc::new(value);
        inner.nodes.push(Node {
            value: Arc::clone(&value),
            op: "leaf",
            backward: None,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
            requires_grad,
            value,
        }
    }

    pub fn constant(&self, value: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.leaf(value, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.leaf(vec![v], vec![1], false)
    }

    /// Gate on the recorded forward pass: returns the root unchanged if no
    /// op produced a non-finite intermediate, otherwise the poisoning
    /// diagnostic.
    pub fn forward_eval(&self, root: &Tensor) -> Result<Tensor, NumericsError> {
        self.check_poison()?;
        Ok(root.clone())
    }

    fn check_poison(&self) -> Result<(), NumericsError> {
        let inner = self.inner.borrow();
        match &inner.poison {
            Some(p) => Err(NumericsError::Poisoned {
                op: p.op,
                node: p.node,
                detail: p.detail.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Reverse-mode gradients of a scalar loss with respect to every node.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, NumericsError> {
        self.check_poison()?;
        if loss.numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let sizes: Vec<usize> = inner.nodes.iter().map(|nd| nd.value.len()).collect();
        let mut slots: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        slots.resize_with(n, || None);
        slots[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if slots[id].is_none() {
                continue;
            }
            let node = &inner.nodes[id];
            if let Some(back) = &node.backward {
                let g = slots[id].take().unwrap();
                {
                    let mut sink = GradSink {
                        slots: &mut slots,
                        sizes: &sizes,
                    };
                    back(&g, &mut sink);
                }
                slots[id] = Some(g);
            }
        }
        Ok(Gradients { slots })
    }

    pub(crate) fn node_op(&self, id: usize) -> &'static str {
        self.inner.borrow().nodes[id].op
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Accumulator handed to backward closures.
pub struct GradSink<'a> {
    slots: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
}

impl GradSink<'_> {
    /// Get-or-init the gradient buffer of `id` and let the closure add into it.
    pub fn with(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        let size = self.sizes[id];
        let buf = self.slots[id].get_or_insert_with(|| vec![0.0; size]);
        f(buf);
    }

    /// Elementwise `grad[id] += src`.
    pub fn add(&mut self, id: usize, src: &[f64]) {
        self.with(id, |g| {
            for (gi, si) in g.iter_mut().zip(src) {
                *gi += si;
            }
        });
    }

    /// Elementwise `grad[id] += k * src`.
    pub fn add_scaled(&mut self, id: usize, src: &[f64], k: f64) {
        self.with(id, |g| {
            for (gi, si) in g.iter_mut().zip(src) {
                *gi += k * si;
            }
        });
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        self.slots.get(t.id).and_then(|s| s.as_deref())
    }

    /// Gradient of `t`, densified to zeros when the loss does not reach it.
    pub fn wrt_dense(&self, t: &Tensor) -> Vec<f64> {
        match self.wrt(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        }
    }
}

/// Immutable handle to a tape node.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
    requires_grad: bool,
    value: Arc<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("op", &self.tape.node_op(self.id))
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn data(&self) -> &[f64] {
        &self.value
    }

    pub fn value(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.value)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value.as_ref().clone()
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.numel(), 1, "scalar() on shape {:?}", self.shape);
        self.value[0]
    }

    pub(crate) fn assert_same_tape(&self, other: &Tensor) {
        assert!(
            self.tape.same_tape(&other.tape),
            "tensors from different tapes (ops `{}` and `{}`)",
            self.tape.node_op(self.id),
            other.tape.node_op(other.id)
        );
    }
}

/// A named, persistent parameter buffer. Lives across steps in a
/// [`ParamStore`]; per-step leaf tensors are bound through [`Ctx::param`].
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Insertion-checked, deterministically ordered parameter table.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "param `{name}` shape/buffer mismatch");
        let prev = self
            .entries
            .insert(name.to_string(), ParamEntry { shape, data });
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.numel()).sum()
    }
}

/// Gradient map over parameters, keyed by name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Per-step binding of a [`ParamStore`] onto a fresh [`Tape`].
///
/// A parameter referenced twice in one step shares a single leaf node, so
/// its gradient accumulates additively across uses.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bindings: RefCell<BTreeMap<String, Tensor>>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bindings: RefCell::new(BTreeMap::new()),
            trainable: true,
        }
    }

    /// Binding with gradient tracking off — inference passes.
    pub fn inference(store: &'a ParamStore) -> Self {
        Ctx {
            trainable: false,
            ..Ctx::new(store)
        }
    }

    /// Bind onto an existing tape (finite-difference probes rebuild the
    /// graph on a caller-owned tape; `trainable: false` binds parameters as
    /// constants so only explicit leaf inputs are differentiated).
    pub fn on_tape(store: &'a ParamStore, tape: Tape, trainable: bool) -> Self {
        Ctx {
            tape,
            store,
            bindings: RefCell::new(BTreeMap::new()),
            trainable,
        }
    }

    /// Like [`Ctx::on_tape`] with selected parameters substituted by
    /// caller-supplied tensors (gradient probes perturb a parameter subset
    /// while the rest bind as constants).
    pub fn with_overrides(
        store: &'a ParamStore,
        tape: Tape,
        overrides: BTreeMap<String, Tensor>,
    ) -> Self {
        for (name, t) in &overrides {
            assert_eq!(
                t.shape(),
                &store.get(name).shape[..],
                "override shape mismatch for `{name}`"
            );
        }
        Ctx {
            tape,
            store,
            bindings: RefCell::new(overrides),
            trainable: false,
        }
    }

    pub fn param(&self, name: &str) -> Tensor {
        if let Some(t) = self.bindings.borrow().get(name) {
            return t.clone();
        }
        let entry = self.store.get(name);
        let t = self
            .tape
            .leaf(entry.data.clone(), entry.shape.clone(), self.trainable);
        self.bindings
            .borrow_mut()
            .insert(name.to_string(), t.clone());
        t
    }

    /// d(loss)/d(parameter) for every parameter bound in this step.
    /// Parameters the loss does not reach get explicit zero gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<GradMap, NumericsError> {
        let grads = self.tape.backward(loss)?;
        let mut map = GradMap::new();
        for (name, tensor) in self.bindings.borrow().iter() {
            map.insert(name.clone(), grads.wrt_dense(tensor));
        }
        Ok(map)
    }
}
