//! Differentiable operations on [`Var`].
//!
//! Binary arithmetic broadcasts with numpy semantics; the backward pass sums
//! gradients back down to each operand's shape.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::conv;
use crate::tape::{sigmoid, softplus, Op, Tensor, Var};

impl<'t> Var<'t> {
    /// Forward value of this node.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The tape this variable was recorded on.
    pub fn tape(&self) -> &'t crate::Tape {
        self.tape
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    fn unary(self, op: Op, out: Tensor) -> Var<'t> {
        self.tape.push(out, op, self.needs_grad())
    }

    fn binary(self, other: Var<'t>, op: Op, out: Tensor) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "mixing tapes");
        let needs = self.needs_grad() || other.needs_grad();
        self.tape.push(out, op, needs)
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().mapv(f64::exp);
        self.unary(Op::Exp(self.id), out)
    }

    pub fn log(self) -> Var<'t> {
        let out = self.value().mapv(f64::ln);
        self.unary(Op::Log(self.id), out)
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().mapv(f64::tanh);
        self.unary(Op::Tanh(self.id), out)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().mapv(sigmoid);
        self.unary(Op::Sigmoid(self.id), out)
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().mapv(|x| x.max(0.0));
        self.unary(Op::Relu(self.id), out)
    }

    pub fn softplus(self) -> Var<'t> {
        let out = self.value().mapv(softplus);
        self.unary(Op::Softplus(self.id), out)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let out = self.value().mapv(|x| x.powf(p));
        self.unary(Op::Powf(self.id, p), out)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    /// Elementwise clamp; the gradient is zero wherever the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let out = self.value().mapv(|x| x.clamp(lo, hi));
        self.unary(Op::Clamp(self.id, lo, hi), out)
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let out = {
            let a = self.value();
            let b = other.value();
            let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
            let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
            a2.dot(&b2).into_dyn()
        };
        self.binary(other, Op::MatMul(self.id, other.id), out)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let out = self.value().sum_axis(Axis(axis));
        self.unary(Op::SumAxis(self.id, axis), out)
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(self) -> Var<'t> {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.unary(Op::SumAll(self.id), out)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum() * (1.0 / n)
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let n = self.value().shape()[axis] as f64;
        self.sum_axis(axis) * (1.0 / n)
    }

    /// Numerically stable `log Σ exp` over one axis, removing it.
    pub fn logsumexp(self, axis: usize) -> Var<'t> {
        let out = logsumexp_axis(&self.value(), axis);
        self.unary(Op::LogSumExp(self.id, axis), out)
    }

    pub fn log_softmax(self, axis: usize) -> Var<'t> {
        self - self.logsumexp(axis).unsqueeze(axis)
    }

    pub fn softmax(self, axis: usize) -> Var<'t> {
        self.log_softmax(axis).exp()
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let out = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.unary(Op::Reshape(self.id), out)
    }

    /// Inserts a unit axis at `axis`.
    pub fn unsqueeze(self, axis: usize) -> Var<'t> {
        let mut shape = self.shape();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    /// Contiguous sub-range `start..end` along `axis`.
    pub fn slice_axis(self, axis: usize, start: usize, end: usize) -> Var<'t> {
        let out = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.unary(Op::Slice(self.id, axis, start, end), out)
    }

    /// `[N, C, H, W]` convolution with an `[O, C, k, k]` kernel.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, padding: usize) -> Var<'t> {
        let (out, geom) = conv::conv2d_forward(&self.value(), &weight.value(), stride, padding);
        self.binary(weight, Op::Conv2d(self.id, weight.id, geom), out)
    }

    /// `[N, Cin, H, W]` transposed convolution with a `[Cin, Cout, k, k]` kernel.
    pub fn conv_transpose2d(self, weight: Var<'t>, stride: usize, padding: usize) -> Var<'t> {
        let (out, geom) =
            conv::conv_transpose2d_forward(&self.value(), &weight.value(), stride, padding);
        self.binary(weight, Op::ConvTranspose2d(self.id, weight.id, geom), out)
    }
}

pub(crate) fn logsumexp_axis(x: &Tensor, axis: usize) -> Tensor {
    let max = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |&m, &v| m.max(v));
    let safe_max = max.mapv(|m| if m.is_finite() { m } else { 0.0 });
    let shifted = x - &safe_max.clone().insert_axis(Axis(axis));
    let sum = shifted.mapv(f64::exp).sum_axis(Axis(axis));
    sum.mapv(f64::ln) + safe_max
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $op:tt) => {
        impl<'t> $trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let out = &*self.value() $op &*rhs.value();
                self.binary(rhs, Op::$variant(self.id, rhs.id), out)
            }
        }
    };
}

binary_op!(Add, add, Add, +);
binary_op!(Sub, sub, Sub, -);
binary_op!(Mul, mul, Mul, *);
binary_op!(Div, div, Div, /);

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        let out = self.value().mapv(|x| x + rhs);
        self.unary(Op::AddScalar(self.id), out)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self + (-rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        let out = self.value().mapv(|x| x * rhs);
        self.unary(Op::MulScalar(self.id, rhs), out)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        (-rhs) + self
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self * (1.0 / rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self * -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;
    use ndarray::{arr1, arr2};

    #[test]
    fn logsumexp_handles_large_and_infinite_entries() {
        let x = arr2(&[[1000.0, 1000.0], [f64::NEG_INFINITY, 0.0]]).into_dyn();
        let out = logsumexp_axis(&x, 1);
        assert!((out[[0]] - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((out[[1]] - 0.0).abs() < 1e-15);
        let all_neg_inf = arr2(&[[f64::NEG_INFINITY, f64::NEG_INFINITY]]).into_dyn();
        assert_eq!(logsumexp_axis(&all_neg_inf, 1)[[0]], f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]).into_dyn());
        let s = x.softmax(1).value();
        for row in s.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcasting_matches_manual_expansion() {
        let tape = Tape::new();
        let a = tape.constant(arr2(&[[1.0], [2.0]]).into_dyn());
        let b = tape.constant(arr1(&[10.0, 20.0, 30.0]).into_dyn());
        let c = (a + b).value();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c[[1, 2]], 32.0);
    }

    #[test]
    fn scalar_ops_compose() {
        let tape = Tape::new();
        let x = tape.var(arr1(&[2.0]).into_dyn());
        let y = (1.0 - x * 3.0) / 2.0 + 4.0;
        assert_eq!(y.item(), 1.5);
        let g = tape.backward(y.sum());
        assert_eq!(g.get(x).unwrap()[[0]], -1.5);
    }
}
