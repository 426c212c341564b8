//! Tape-based reverse-mode automatic differentiation over dynamic-dimension
//! f64 arrays.
//!
//! A [`Graph`] is rebuilt for every forward pass (define-by-run). Each op
//! pushes a node holding its value and a backward closure that maps the
//! output gradient to parent gradients. Nodes are created in topological
//! order, so the backward sweep is a single reverse scan over node ids.
//!
//! Parameters live outside the graph in a [`ParamStore`]; leafing a parameter
//! into a graph records the mapping so gradients can be read back by
//! parameter id after [`Graph::backward`].

pub mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(pub(crate) usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a non-trainable buffer (e.g. BatchNorm running statistics).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct BufferId(pub usize);

/// Learning-rate group provenance tag per the training protocol.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub enum ParamTag {
    Head,
    BackbonePretrained,
    BackboneRandom,
}

type BackFn = Box<dyn Fn(&Arr) -> Vec<Option<Arr>>>;

struct Node {
    value: Rc<Arr>,
    parents: Vec<Var>,
    backward: Option<BackFn>,
    requires_grad: bool,
}

/// A single forward computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    /// When true, matmul-class ops accumulate multiply-add FLOPs
    /// (multiply-add counted as 2) into `flops`.
    pub count_flops: bool,
    pub flops: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
            param_order: Vec::new(),
            count_flops: false,
            flops: 0,
        }
    }

    fn push(&mut self, value: Arr, parents: Vec<Var>, backward: Option<BackFn>) -> Var {
        let requires_grad =
            backward.is_some() && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Rc<Arr>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input: no gradient is tracked through it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push_leaf(Rc::new(value), false)
    }

    /// A differentiable leaf (used for inputs whose gradient is wanted).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push_leaf(Rc::new(value), true)
    }

    /// Leaf a parameter into the graph. Repeated calls for the same id return
    /// the same node so gradients accumulate naturally.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.entries[id.0].value.clone(), true);
        self.param_vars.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn rc_value(&self, v: Var) -> Rc<Arr> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a 0-d (scalar) node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert!(a.len() == 1, "scalar_value on non-scalar node");
        *a.iter().next().unwrap()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let root_node = &self.nodes[root.0];
        assert!(root_node.value.len() == 1, "backward root must be scalar");
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(root_node.value.raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &self.nodes[id];
            if !node.requires_grad && node.backward.is_some() {
                continue;
            }
            if let Some(bw) = &node.backward {
                let g = grads[id].as_ref().unwrap();
                let parent_grads = bw(g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    if let Some(pg) = pg {
                        debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                        match &mut grads[p.0] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients {
            grads,
            param_order: self.param_order.clone(),
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
    param_order: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Arr> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for all parameters leafed into the graph, in leafing order.
    pub fn params(&self) -> Vec<(ParamId, &Arr)> {
        self.param_order
            .iter()
            .filter_map(|(pid, v)| self.grads[v.0].as_ref().map(|g| (*pid, g)))
            .collect()
    }
}

/// Named parameter with provenance tag and weight-decay eligibility.
pub struct ParamEntry {
    pub name: String,
    pub value: Rc<Arr>,
    pub tag: Option<ParamTag>,
    pub decay: bool,
}

/// Named non-trainable buffer, mutable during training forward passes.
pub struct BufferEntry {
    pub name: String,
    pub value: RefCell<Arr>,
}

/// Container owning all parameters and buffers of a model.
#[derive(Default)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
    pub buffers: Vec<BufferEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr, tag: Option<ParamTag>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value: Rc::new(value),
            tag,
            decay,
        });
        id
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Arr) -> BufferId {
        let id = BufferId(self.buffers.len());
        self.buffers.push(BufferEntry {
            name: name.into(),
            value: RefCell::new(value),
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Arr) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape(), "param shape change");
        self.entries[id.0].value = Rc::new(value);
    }

    /// In-place update helper used by the optimizer; clones only if a graph
    /// still shares the value.
    pub fn update_with(&mut self, id: ParamId, f: impl FnOnce(&mut Arr)) {
        let val = Rc::make_mut(&mut self.entries[id.0].value);
        f(val);
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn buffer(&self, id: BufferId) -> std::cell::Ref<'_, Arr> {
        self.buffers[id.0].value.borrow()
    }

    pub fn buffer_mut(&self, id: BufferId) -> std::cell::RefMut<'_, Arr> {
        self.buffers[id.0].value.borrow_mut()
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Set the provenance tag for every parameter whose name starts with
    /// `prefix`. Returns how many parameters were retagged.
    pub fn retag_prefix(&mut self, prefix: &str, tag: ParamTag) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.tag = Some(tag);
                n += 1;
            }
        }
        n
    }
}

/// Forward-pass mode: evaluation, or training with an RNG for stochastic
/// regularizers (dropout, stochastic depth).
#[derive(Clone, Copy)]
pub enum Mode<'r> {
    Eval,
    Train { rng: &'r RefCell<ChaCha8Rng> },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Central finite-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Arr) -> f64, x: &Arr, step: f64) -> Arr {
    let mut grad = Arr::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let flat = xp.as_slice_mut().unwrap();
        let orig = flat[idx];
        flat[idx] = orig + step;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - step;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Max relative error between analytic and finite-difference gradients with a
/// small-magnitude floor on the denominator.
pub fn max_rel_err(analytic: &Arr, numeric: &Arr) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Finite-difference check of parameter gradients for a scalar loss.
///
/// `loss` must be a pure function of the store contents. At most
/// `max_coords` coordinates per parameter are probed (evenly strided).
/// Returns the max relative error over all probed coordinates.
pub fn check_param_grads(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut loss: impl FnMut(&ParamStore) -> f64,
    analytic: &HashMap<ParamId, Arr>,
    step: f64,
    max_coords: usize,
) -> f64 {
    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.get(id).len();
        let stride = (n / max_coords.max(1)).max(1);
        let an = analytic
            .get(&id)
            .unwrap_or_else(|| panic!("no analytic grad for param {}", store.entries[id.0].name));
        for c in (0..n).step_by(stride) {
            let orig = store.get(id).as_slice().unwrap()[c];
            store.update_with(id, |a| a.as_slice_mut().unwrap()[c] = orig + step);
            let fp = loss(store);
            store.update_with(id, |a| a.as_slice_mut().unwrap()[c] = orig - step);
            let fm = loss(store);
            store.update_with(id, |a| a.as_slice_mut().unwrap()[c] = orig);
            let num = (fp - fm) / (2.0 * step);
            let a = an.as_slice().unwrap()[c];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}
