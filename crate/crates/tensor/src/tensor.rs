use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};

/// Gradient rule of a recorded operation.
///
/// Called with the upstream gradient, the operation's inputs and its output
/// values; returns one gradient per input (`None` for inputs that do not
/// require gradients).
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[Tensor], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CHECKED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) struct Node {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    grad: Mutex<Option<Vec<f64>>>,
}

/// Dense row-major tensor. Cloning is cheap and shares the underlying node.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Whether operations currently record themselves for differentiation.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Whether operations validate their outputs (NaN/Inf, log/sqrt domains).
pub fn is_checked() -> bool {
    CHECKED.with(|c| c.get())
}

/// Restores the previous grad mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Disables graph recording on this thread until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    GradModeGuard { prev }
}

pub struct CheckedModeGuard {
    prev: bool,
}

impl Drop for CheckedModeGuard {
    fn drop(&mut self) {
        CHECKED.with(|c| c.set(self.prev));
    }
}

/// Switches checked mode on this thread until the guard is dropped.
pub fn set_checked(on: bool) -> CheckedModeGuard {
    let prev = CHECKED.with(|c| c.replace(on));
    CheckedModeGuard { prev }
}

impl Tensor {
    fn build(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            shape,
            data,
            requires_grad,
            parents,
            backward,
            grad: Mutex::new(None),
        }))
    }

    /// Leaf tensor. Fails if `data.len()` does not match `shape`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(TensorError::Dimension {
                op: "new",
                detail: format!("{} values for shape {:?}", data.len(), shape),
            });
        }
        if is_checked() && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self::build(
            "leaf",
            data,
            shape.to_vec(),
            false,
            vec![],
            None,
        ))
    }

    /// Trainable leaf: participates in differentiation and accumulates `grad`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Self::new(data, shape)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::build("leaf", vec![v], vec![], false, vec![], None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Self::build(
            "leaf",
            vec![v; numel(shape)],
            shape.to_vec(),
            false,
            vec![],
            None,
        )
    }

    /// Same values as a fresh leaf with the given flag. Any graph history is dropped.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Tensor {
        Self::build(
            "leaf",
            self.0.data.clone(),
            self.0.shape.clone(),
            requires_grad,
            vec![],
            None,
        )
    }

    /// Values of this tensor cut from the graph.
    pub fn detach(&self) -> Tensor {
        self.with_requires_grad(false)
    }

    /// Records the result of an operation. Validates finiteness in checked mode
    /// and drops the graph edges when no input requires gradients.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(data.len(), numel(&shape));
        if is_checked() && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Ok(Self::build(op, data, shape, true, parents, Some(backward)))
        } else {
            Ok(Self::build(op, data, shape, false, vec![], None))
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn parents(&self) -> &[Tensor] {
        &self.0.parents
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar. Every reachable leaf with
    /// `requires_grad` receives d(self)/d(leaf), added to any existing gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let graph = Graph::from_root(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in graph.order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                None => node.accumulate_grad(&g),
                Some(rule) => {
                    let parent_grads = rule(&g, &node.0.parents, &node.0.data);
                    for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "grad of {}", node.op_name());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Recorded operations reachable from a root, in topological order
/// (inputs before the operations that consume them).
pub struct Graph {
    order: Vec<Tensor>,
}

impl Graph {
    pub fn from_root(root: &Tensor) -> Graph {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (node, children already pushed)
        let mut stack = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !node.requires_grad() || !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.parents().iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        Graph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn nodes(&self) -> &[Tensor] {
        &self.order
    }
}
