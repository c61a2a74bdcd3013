//! The recording tape and the backward pass.
//!
//! Every differentiable value lives on a [`Tape`] as a node holding its forward
//! value and the operation that produced it. [`Var`] is a cheap copyable handle
//! to such a node. [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order because parents are always recorded
//! before their children.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::conv::{self, ConvGeometry};

/// Dense, dynamically shaped `f64` array used for every value on the tape.
pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softplus(usize),
    Powf(usize, f64),
    MatMul(usize, usize),
    SumAxis(usize, usize),
    SumAll(usize),
    LogSumExp(usize, usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize, usize),
    Clamp(usize, f64, f64),
    Conv2d(usize, usize, ConvGeometry),
    ConvTranspose2d(usize, usize, ConvGeometry),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records operations so that gradients can be computed afterwards.
///
/// A tape is single-threaded and append-only; build a fresh one per
/// forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable leaf (a parameter or an input we want gradients for).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Concatenates along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let needs = parts.iter().any(|p| p.needs_grad());
        self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), needs)
    }

    /// Reverse pass from a scalar (single-element) output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward requires a single-element output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(ArrayD::ones(nodes[output.id].value.raw_dim()));

        for id in (0..=output.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let mut send = |i: usize, contribution: Tensor| {
                if !nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => *acc += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, unbroadcast(&g, val(*a).shape()));
                    send(*b, unbroadcast(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, unbroadcast(&g, val(*a).shape()));
                    send(*b, -unbroadcast(&g, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        send(*a, unbroadcast(&(&g * val(*b)), val(*a).shape()));
                    }
                    if nodes[*b].needs_grad {
                        send(*b, unbroadcast(&(&g * val(*a)), val(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if nodes[*a].needs_grad {
                        send(*a, unbroadcast(&(&g / bv), val(*a).shape()));
                    }
                    if nodes[*b].needs_grad {
                        // d(a/b)/db = -a/b^2 = -out/b
                        let gb = -(&g * &*node.value) / bv;
                        send(*b, unbroadcast(&gb, bv.shape()));
                    }
                }
                Op::AddScalar(a) => send(*a, g),
                Op::MulScalar(a, c) => send(*a, g * *c),
                Op::Exp(a) => send(*a, g * &*node.value),
                Op::Log(a) => send(*a, g / val(*a)),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|t| 1.0 - t * t);
                    send(*a, g * d)
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|s| s * (1.0 - s));
                    send(*a, g * d)
                }
                Op::Relu(a) => {
                    let d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    send(*a, g * d)
                }
                Op::Softplus(a) => {
                    let d = val(*a).mapv(sigmoid);
                    send(*a, g * d)
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let d = val(*a).mapv(|x| p * x.powf(p - 1.0));
                    send(*a, g * d)
                }
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    if nodes[*a].needs_grad {
                        let b2 = as2(val(*b));
                        send(*a, g2.dot(&b2.t()).into_dyn());
                    }
                    if nodes[*b].needs_grad {
                        let a2 = as2(val(*a));
                        send(*b, a2.t().dot(&g2).into_dyn());
                    }
                }
                Op::SumAxis(a, axis) => {
                    let shape = val(*a).raw_dim();
                    let expanded = g.insert_axis(Axis(*axis));
                    send(*a, expanded.broadcast(shape).unwrap().to_owned());
                }
                Op::SumAll(a) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    send(*a, ArrayD::from_elem(val(*a).raw_dim(), s));
                }
                Op::LogSumExp(a, axis) => {
                    let av = val(*a);
                    let lse = (*node.value).clone().insert_axis(Axis(*axis));
                    let gexp = g.insert_axis(Axis(*axis));
                    let weights = (av - &lse).mapv(f64::exp);
                    send(*a, &weights * &gexp);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    let g = g.as_standard_layout().into_owned();
                    send(*a, g.into_shape_with_order(IxDyn(&shape)).unwrap());
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned();
                        offset += len;
                        send(p, piece);
                    }
                }
                Op::Slice(a, axis, start, end) => {
                    let mut full = ArrayD::zeros(val(*a).raw_dim());
                    full.slice_axis_mut(Axis(*axis), Slice::from(*start..*end))
                        .assign(&g);
                    send(*a, full);
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = val(*a).mapv(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                    send(*a, g * mask);
                }
                Op::Conv2d(x, w, geom) => {
                    let (gx, gw) = conv::conv2d_backward(val(*x), val(*w), &g, geom);
                    if nodes[*x].needs_grad {
                        send(*x, gx);
                    }
                    if nodes[*w].needs_grad {
                        send(*w, gw);
                    }
                }
                Op::ConvTranspose2d(x, w, geom) => {
                    let (gx, gw) = conv::conv_transpose2d_backward(val(*x), val(*w), &g, geom);
                    if nodes[*x].needs_grad {
                        send(*x, gx);
                    }
                    if nodes[*w].needs_grad {
                        send(*w, gw);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the leaves they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `var`, if it is a leaf that
    /// participated in the computation.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros for leaves the output does not depend on.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(var.value().raw_dim()))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("matmul operands must be 2-D")
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn unbroadcast(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &len) in shape.iter().enumerate() {
        if len == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn unbroadcast_sums_leading_and_unit_axes() {
        let g = ArrayD::ones(IxDyn(&[2, 3, 4]));
        assert_eq!(unbroadcast(&g, &[3, 4]), ArrayD::from_elem(IxDyn(&[3, 4]), 2.0));
        assert_eq!(
            unbroadcast(&g, &[2, 1, 4]),
            ArrayD::from_elem(IxDyn(&[2, 1, 4]), 3.0)
        );
        assert_eq!(unbroadcast(&g, &[1]), ArrayD::from_elem(IxDyn(&[1]), 24.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(arr2(&[[1.0, 2.0]]).into_dyn());
        let c = tape.constant(arr2(&[[3.0, 4.0]]).into_dyn());
        let y = (x * c).sum();
        let grads = tape.backward(y);
        assert_eq!(grads.get(x).unwrap(), &arr2(&[[3.0, 4.0]]).into_dyn());
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.var(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let y = (x * x + x).sum();
        let grads = tape.backward(y);
        assert_eq!(grads.get(x).unwrap()[[0]], 7.0);
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
