//! Reverse-mode autodiff tape over `f64` ndarrays.
//!
//! A [`Graph`] is a single-use tape: build a forward pass through the op
//! methods (see the sibling modules), call [`Graph::backward`] on a scalar
//! loss, then read leaf gradients back into the [`ParamStore`]. Parameters
//! live outside the tape so a fresh graph can be built every step; binding a
//! parameter twice returns the same leaf, which is how shared weights (e.g.
//! one feature extractor applied to both images) accumulate gradients from
//! every use.
//!
//! Whether a leaf is trainable this pass is decided by the caller via
//! [`Graph::mark_trainable`] before binding; anything not marked is treated
//! as a constant and no backward kernels are recorded for subgraphs that
//! depend only on constants. [`Graph::no_grad`] additionally suppresses
//! recording for a region regardless of its inputs.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::ArrayD;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Gradient kernel for one op: given ∂L/∂out, produce ∂L/∂input per parent
/// (or `None` for parents that need no gradient).
pub(crate) trait Backward {
    fn backward(&self, ctx: &Ctx<'_>, grad_out: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>;
}

/// Read-only view of the tape handed to backward kernels.
pub(crate) struct Ctx<'g> {
    graph: &'g Graph,
    node: usize,
}

impl Ctx<'_> {
    /// Value of the i-th parent of the node being differentiated.
    pub fn parent(&self, i: usize) -> &ArrayD<f64> {
        let p = self.graph.nodes[self.node].parents[i];
        &self.graph.nodes[p.0].value
    }

    /// Forward output of the node being differentiated.
    pub fn out(&self) -> &ArrayD<f64> {
        &self.graph.nodes[self.node].value
    }

    /// Whether the i-th parent needs a gradient at all. Kernels use this to
    /// skip expensive products (e.g. weight gradients of frozen layers).
    pub fn needs_grad(&self, i: usize) -> bool {
        let p = self.graph.nodes[self.node].parents[i];
        self.graph.nodes[p.0].requires_grad
    }
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    parents: Vec<TensorId>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Single-use reverse-mode tape.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    trainable: BTreeSet<ParamId>,
    bound: BTreeMap<ParamId, TensorId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            trainable: BTreeSet::new(),
            bound: BTreeMap::new(),
        }
    }

    /// Declares which parameters receive gradients when bound on this tape.
    /// Must be called before the first `bind` of the affected parameters.
    pub fn mark_trainable<I: IntoIterator<Item = ParamId>>(&mut self, ids: I) {
        self.trainable.extend(ids);
    }

    /// Inserts a constant leaf (no gradient).
    pub fn input(&mut self, value: ArrayD<f64>) -> TensorId {
        self.leaf(value, false)
    }

    /// Inserts a leaf that collects a gradient during `backward`.
    pub fn variable(&mut self, value: ArrayD<f64>) -> TensorId {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> TensorId {
        // Every node value is kept in standard layout; op kernels rely on it.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            parents: Vec::new(),
            op: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        id
    }

    /// Binds a stored parameter as a leaf, memoized: binding the same
    /// parameter again returns the same node, so shared weights accumulate
    /// gradients across every use site.
    pub fn bind(&mut self, store: &ParamStore, p: ParamId) -> TensorId {
        if let Some(&t) = self.bound.get(&p) {
            return t;
        }
        let trainable = self.trainable.contains(&p);
        let t = self.leaf(store.values[p.0].clone(), trainable);
        self.bound.insert(p, t);
        t
    }

    /// Runs `f` with gradient recording disabled; nodes created inside are
    /// constants even if built from trainable leaves.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.grad_enabled;
        self.grad_enabled = false;
        let r = f(self);
        self.grad_enabled = prev;
        r
    }

    /// Copies a node's value into a fresh constant leaf, severing it from
    /// its history.
    pub fn detach(&mut self, t: TensorId) -> TensorId {
        let v = self.nodes[t.0].value.clone();
        self.input(v)
    }

    pub fn value(&self, t: TensorId) -> &ArrayD<f64> {
        &self.nodes[t.0].value
    }

    /// Scalar convenience accessor; panics if the node is not a scalar.
    pub fn scalar(&self, t: TensorId) -> f64 {
        let v = &self.nodes[t.0].value;
        assert_eq!(v.len(), 1, "scalar() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Gradient accumulated at a leaf after `backward`.
    pub fn grad(&self, t: TensorId) -> Option<&ArrayD<f64>> {
        self.nodes[t.0].grad.as_ref()
    }

    pub fn requires_grad(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Internal: append an op node. The kernel is dropped (and the node
    /// becomes a constant) when no parent needs gradients or recording is
    /// off.
    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<TensorId>,
        op: Box<dyn Backward>,
    ) -> TensorId {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            parents,
            op: requires_grad.then_some(op),
            requires_grad,
        });
        id
    }

    /// Reverse sweep from a scalar loss. Gradients of interior nodes are
    /// freed as soon as they have been propagated; leaf gradients remain
    /// readable via [`Graph::grad`] / collectible via
    /// [`Graph::collect_grads`].
    pub fn backward(&mut self, loss: TensorId) {
        let n = &self.nodes[loss.0];
        assert_eq!(n.value.len(), 1, "backward() needs a scalar loss");
        assert!(
            n.requires_grad,
            "loss does not depend on any trainable leaf"
        );
        self.nodes[loss.0].grad = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].op.is_none() || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            let op = self.nodes[i].op.take().unwrap();
            let parents = self.nodes[i].parents.clone();
            let contribs = {
                let ctx = Ctx { graph: self, node: i };
                op.backward(&ctx, &grad)
            };
            debug_assert_eq!(contribs.len(), parents.len());
            for (p, c) in parents.into_iter().zip(contribs) {
                let node = &mut self.nodes[p.0];
                if !node.requires_grad {
                    continue;
                }
                let c = match c {
                    Some(c) => c,
                    None => continue,
                };
                debug_assert_eq!(
                    c.shape(),
                    node.value.shape(),
                    "gradient shape mismatch into node {}",
                    p.0
                );
                match &mut node.grad {
                    Some(g) => *g += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
    }

    /// Adds the gradients of all bound trainable parameters into the store's
    /// gradient buffers (which the optimizer consumes and zeroes).
    pub fn collect_grads(&self, store: &mut ParamStore) {
        for (&p, &t) in &self.bound {
            if !self.trainable.contains(&p) {
                continue;
            }
            if let Some(g) = self.nodes[t.0].grad.as_ref() {
                store.grads[p.0] += g;
            }
        }
    }
}

/// Named parameter tensors plus gradient accumulation buffers. Names are
/// dot-separated paths (`"feature_extractor.stem.w"`); prefix queries give
/// the per-module parameter groups the trainer freezes or optimizes.
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    grads: Vec<ArrayD<f64>>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id.0);
        self.names.push(name);
        self.grads.push(ArrayD::zeros(value.raw_dim()));
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// All parameters whose name starts with `prefix`, in name order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.index
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, &i)| ParamId(i))
            .collect()
    }

    /// All parameters in name order.
    pub fn all_ids(&self) -> Vec<ParamId> {
        self.index.values().map(|&i| ParamId(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, p: ParamId) -> &str {
        &self.names[p.0]
    }

    pub fn value(&self, p: ParamId) -> &ArrayD<f64> {
        &self.values[p.0]
    }

    pub fn value_mut(&mut self, p: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[p.0]
    }

    pub fn grad(&self, p: ParamId) -> &ArrayD<f64> {
        &self.grads[p.0]
    }

    pub fn zero_grad(&mut self, p: ParamId) {
        self.grads[p.0].fill(0.0);
    }

    pub fn zero_all_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}
