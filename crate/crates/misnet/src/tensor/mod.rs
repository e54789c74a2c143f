//! Reverse-mode automatic differentiation over f64 `ndarray` tensors.
//!
//! A [`Tape`] records every operation as a node holding its value, its parent
//! node ids, and a backward closure mapping the output gradient to parent
//! gradients. [`Var`] is a cheap copyable handle into the tape. Values are
//! reference-counted (`ArcArray`), so cloning a value never copies the data.
//!
//! The engine exists because the verification contract here is f64
//! finite-difference agreement end to end, which rules out f32 frameworks and
//! keeps every operator's backward pass inspectable in one place.

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod resize;

pub use conv::{avg_pool2d, box_mean_same, conv2d};
pub use ops::{batch_norm, concat};
pub use resize::{resize_bilinear, resize_bilinear_plane, resize_nearest_plane};

use ndarray::{IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

pub type ArrayD = ndarray::ArrayD<f64>;
pub type Shared = ndarray::ArcArray<f64, IxDyn>;

/// Context handed to a backward closure.
pub struct BackCtx<'a> {
    /// Gradient of the scalar objective wrt this node's value.
    pub grad: &'a ArrayD,
    /// Parent values, in the order they were passed to `push`.
    pub parents: &'a [Shared],
    /// This node's forward value.
    pub value: &'a Shared,
}

type BackFn = Box<dyn Fn(&BackCtx) -> Vec<ArrayD>>;

struct Node {
    value: Shared,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    param: Option<Rc<Parameter>>,
}

/// A named trainable tensor with an accumulated gradient slot.
pub struct Parameter {
    name: String,
    value: RefCell<Shared>,
    grad: RefCell<Option<ArrayD>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: ArrayD) -> Rc<Parameter> {
        Rc::new(Parameter {
            name: name.into(),
            value: RefCell::new(value.into_shared()),
            grad: RefCell::new(None),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Shared {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn set_value(&self, value: ArrayD) {
        *self.value.borrow_mut() = value.into_shared();
    }

    pub fn grad(&self) -> Option<ArrayD> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    pub fn set_grad(&self, g: ArrayD) {
        *self.grad.borrow_mut() = Some(g);
    }

    fn accumulate_grad(&self, g: &ArrayD) {
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.clone()),
        }
    }
}

/// Records the computation graph of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Handle to one node of a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A forward-only tape: ops still chain, but no backward closures or
    /// parent links are kept and `backward` is unavailable.
    pub fn eval() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf with no gradient flow.
    pub fn constant(&self, value: ArrayD) -> Var<'_> {
        self.push_node(value.into_shared(), Vec::new(), None, None)
    }

    pub fn constant_shared(&self, value: Shared) -> Var<'_> {
        self.push_node(value, Vec::new(), None, None)
    }

    /// A leaf bound to a parameter; `backward` accumulates into the
    /// parameter's grad slot.
    pub fn param(&self, p: &Rc<Parameter>) -> Var<'_> {
        let link = if self.grad_enabled { Some(Rc::clone(p)) } else { None };
        self.push_node(p.value(), Vec::new(), None, link)
    }

    /// Records an op node. `backward` receives the output gradient and must
    /// return one gradient per parent, each shaped like that parent's value.
    pub fn push(&self, value: ArrayD, parents: Vec<Var<'_>>, backward: BackFn) -> Var<'_> {
        let parent_ids = parents.iter().map(|v| v.id).collect();
        if self.grad_enabled {
            self.push_node(value.into_shared(), parent_ids, Some(backward), None)
        } else {
            self.push_node(value.into_shared(), Vec::new(), None, None)
        }
    }

    fn push_node(
        &self,
        value: Shared,
        parents: Vec<usize>,
        backward: Option<BackFn>,
        param: Option<Rc<Parameter>>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from `root`, seeded with ones. Parameter leaves
    /// accumulate into their grad slots; the returned table allows reading
    /// gradients of intermediate nodes (e.g. inputs) by handle.
    pub fn backward(&self, root: Var<'_>) -> Grads {
        assert!(self.grad_enabled, "backward on an eval tape");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD>> = vec![None; root.id + 1];
        grads[root.id] = Some(ArrayD::ones(nodes[root.id].value.raw_dim()));
        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(p) = &node.param {
                p.accumulate_grad(&grad);
            }
            if let Some(back) = &node.backward {
                let parent_values: Vec<Shared> = node
                    .parents
                    .iter()
                    .map(|&pid| nodes[pid].value.clone())
                    .collect();
                let ctx = BackCtx {
                    grad: &grad,
                    parents: &parent_values,
                    value: &node.value,
                };
                let parent_grads = back(&ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "grad shape for node {pid}");
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Grads { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<ArrayD>>,
}

impl Grads {
    pub fn wrt(&self, v: Var<'_>) -> Option<&ArrayD> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Shared {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The single element of a 0-d (or one-element) value.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on a value with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Broadcast shape of two operand shapes under trailing-axis alignment.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sums `grad` down to `shape` (the adjoint of broadcasting).
pub(crate) fn reduce_to_shape(grad: ArrayD, shape: &[usize]) -> ArrayD {
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(ndarray::Axis(0));
    }
    for (axis, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape).enumerate() {
        if sd == 1 && gd != 1 {
            let summed = g.sum_axis(ndarray::Axis(axis)).insert_axis(ndarray::Axis(axis));
            g = summed;
        }
    }
    g
}
