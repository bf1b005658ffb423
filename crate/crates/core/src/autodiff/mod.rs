//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to [`Var`]s that descend from a
//! recorded leaf or parameter. Values are reference counted, so a graph built
//! with [`Graph::inference`] keeps nothing alive beyond the caller's handles.
//!
//! Layout convention: channel-major. Feature maps are `[C, H, W]`, token
//! sequences are `[C, L]` (or `[C, windows, tokens]`), so channel mixing is a
//! single GEMM and spatial or sequential work walks contiguous rows.

mod conv;
mod deform;
mod elementwise;
mod gather;
mod linear;
mod loss;
mod norm;
mod sample;
mod scan;

pub(crate) use loss::charbonnier_value;
pub use gather::pixel_shuffle_perm;
pub use sample::sample_plane;

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use crate::params::{ParamId, ParamSet};
use crate::real::Real;

/// Up to four dimensions, stored inline.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; 4],
    rank: u8,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        assert!(dims.len() <= 4, "rank {} exceeds 4", dims.len());
        let mut d = [1usize; 4];
        d[..dims.len()].copy_from_slice(dims);
        Shape { dims: d, rank: dims.len() as u8 }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Leading (channel) dimension.
    pub fn channels(&self) -> usize {
        if self.rank == 0 {
            1
        } else {
            self.dims[0]
        }
    }

    /// Product of every dimension after the first.
    pub fn inner(&self) -> usize {
        self.dims().iter().skip(1).product()
    }

    pub(crate) fn with_channels(&self, c: usize) -> Self {
        let mut s = *self;
        s.dims[0] = c;
        s
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// A tensor value, optionally attached to a node of the recording graph.
#[derive(Clone)]
pub struct Var<T> {
    shape: Shape,
    data: Rc<Vec<T>>,
    node: Option<usize>,
}

impl<T: Real> Var<T> {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when gradients can flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same storage viewed under another shape with equal element count.
    pub fn reshape(&self, dims: &[usize]) -> Var<T> {
        let shape = Shape::new(dims);
        assert_eq!(shape.numel(), self.shape.numel(), "reshape {:?} -> {:?}", self.shape, dims);
        Var { shape, data: self.data.clone(), node: self.node }
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("shape", &self.shape).field("node", &self.node).finish()
    }
}

pub(crate) trait Backward<T: Real> {
    fn backward(&self, out_grad: &[T], sink: &mut GradSink<'_, T>);
}

struct Node<T: Real> {
    inputs: Vec<Option<usize>>,
    len: usize,
    op: Option<Box<dyn Backward<T>>>,
}

/// Hands out (lazily zeroed) gradient buffers for the inputs of one node.
pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    inputs: &'a [Option<usize>],
    lens: &'a [usize],
}

impl<T: Real> GradSink<'_, T> {
    /// Whether input `i` needs a gradient at all.
    pub fn wants(&self, i: usize) -> bool {
        self.inputs[i].is_some()
    }

    pub fn get(&mut self, i: usize) -> Option<&mut [T]> {
        let node = self.inputs[i]?;
        let len = self.lens[node];
        Some(self.grads[node].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }
}

/// Gradients produced by [`Graph::backward`]; only leaves keep their buffers.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a recorded leaf.
    pub fn wrt(&self, v: &Var<T>) -> Option<&[T]> {
        v.node.and_then(|n| self.grads.get(n)).and_then(|g| g.as_deref())
    }
}

/// Recording context for differentiable computation.
pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamSet<T>>,
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
    param_vars: RefCell<Vec<Option<Var<T>>>>,
}

impl<'p, T: Real> Graph<'p, T> {
    /// A recording graph without parameters (leaves only).
    pub fn new() -> Self {
        Graph { params: None, recording: true, nodes: RefCell::new(Vec::new()), param_vars: RefCell::new(Vec::new()) }
    }

    /// A recording graph over a parameter set.
    pub fn with_params(params: &'p ParamSet<T>) -> Self {
        Graph {
            params: Some(params),
            recording: true,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(vec![None; params.len()]),
        }
    }

    /// A non-recording graph: no tape, no saved activations.
    pub fn inference(params: &'p ParamSet<T>) -> Self {
        Graph {
            params: Some(params),
            recording: false,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// A value that never receives gradients.
    pub fn constant(&self, dims: &[usize], data: Vec<T>) -> Var<T> {
        let shape = Shape::new(dims);
        assert_eq!(shape.numel(), data.len(), "constant {:?} with {} values", dims, data.len());
        Var { shape, data: Rc::new(data), node: None }
    }

    pub fn zeros(&self, dims: &[usize]) -> Var<T> {
        let n = Shape::new(dims).numel();
        self.constant(dims, vec![T::zero(); n])
    }

    pub fn full(&self, dims: &[usize], v: T) -> Var<T> {
        let n = Shape::new(dims).numel();
        self.constant(dims, vec![v; n])
    }

    /// A differentiable input.
    pub fn leaf(&self, dims: &[usize], data: Vec<T>) -> Var<T> {
        let mut v = self.constant(dims, data);
        if self.recording {
            v.node = Some(self.push_node(Vec::new(), v.data.len(), None));
        }
        v
    }

    /// The current value of a parameter; repeated calls share one leaf.
    pub fn param(&self, id: ParamId) -> Var<T> {
        let params = self.params.expect("graph has no parameter set");
        if let Some(v) = &self.param_vars.borrow()[id.index()] {
            return v.clone();
        }
        let p = params.get(id);
        let mut v = Var { shape: Shape::new(p.dims()), data: p.shared_data(), node: None };
        if self.recording {
            v.node = Some(self.push_node(Vec::new(), v.data.len(), None));
        }
        self.param_vars.borrow_mut()[id.index()] = Some(v.clone());
        v
    }

    fn push_node(&self, inputs: Vec<Option<usize>>, len: usize, op: Option<Box<dyn Backward<T>>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { inputs, len, op });
        nodes.len() - 1
    }

    /// Whether any of `inputs` is tracked, i.e. whether a backward op is worth building.
    pub(crate) fn tracks(&self, inputs: &[&Var<T>]) -> bool {
        self.recording && inputs.iter().any(|v| v.node.is_some())
    }

    /// Wraps an op output; attaches `op` to the tape when any input is tracked.
    pub(crate) fn record<B: Backward<T> + 'static>(
        &self,
        dims: Shape,
        data: Vec<T>,
        inputs: &[&Var<T>],
        op: impl FnOnce() -> B,
    ) -> Var<T> {
        debug_assert_eq!(dims.numel(), data.len());
        let node = if self.tracks(inputs) {
            let ins = inputs.iter().map(|v| v.node).collect();
            Some(self.push_node(ins, data.len(), Some(Box::new(op()))))
        } else {
            None
        };
        Var { shape: dims, data: Rc::new(data), node }
    }

    /// Backpropagates from a scalar.
    pub fn backward(&self, loss: &Var<T>) -> Gradients<T> {
        assert_eq!(loss.len(), 1, "backward() needs a scalar, got {:?}", loss.shape);
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Gradients { grads };
        };
        let lens: Vec<usize> = nodes.iter().map(|n| n.len).collect();
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let node = &nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let (before, _) = grads.split_at_mut(i);
            let mut sink = GradSink { grads: before, inputs: &node.inputs, lens: &lens };
            op.backward(&g, &mut sink);
        }
        Gradients { grads }
    }

    /// Gradients for every parameter touched in this graph, aligned with the parameter set.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Vec<T>>> {
        self.param_vars
            .borrow()
            .iter()
            .map(|v| v.as_ref().and_then(|v| grads.wrt(v)).map(|g| g.to_vec()))
            .collect()
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central finite differences over a scalar function of one leaf.
    use super::*;

    /// Returns (analytic, numeric) gradients of `f` at `x0`.
    pub fn check<F>(dims: &[usize], x0: &[f64], f: F) -> (Vec<f64>, Vec<f64>)
    where
        F: Fn(&Graph<'_, f64>, &Var<f64>) -> Var<f64>,
    {
        let g = Graph::new();
        let x = g.leaf(dims, x0.to_vec());
        let y = f(&g, &x);
        let grads = g.backward(&y);
        let analytic = grads.wrt(&x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x0.len()]);
        let h = 1e-5;
        let numeric = (0..x0.len())
            .map(|i| {
                let eval = |d: f64| {
                    let g = Graph::new();
                    let mut xs = x0.to_vec();
                    xs[i] += d;
                    let x = g.constant(dims, xs);
                    f(&g, &x).item()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect();
        (analytic, numeric)
    }

    pub fn assert_close(analytic: &[f64], numeric: &[f64], rel: f64) {
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a - n).abs();
            assert!(err <= rel * (n.abs().max(a.abs())) + rel * 1e-2 * scale, "index {i}: analytic {a} vs numeric {n}");
        }
    }

    /// Deterministic pseudo-random values in [-1, 1).
    pub fn values(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Weighted sum so every output element influences the scalar differently.
    pub fn probe(g: &Graph<'_, f64>, y: &Var<f64>, seed: u64) -> Var<f64> {
        let w = g.constant(y.dims(), values(y.len(), seed));
        g.sum(&g.mul(y, &w))
    }
}
