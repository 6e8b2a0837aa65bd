//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in program
//! order, which is already a topological order of the computation graph.
//! [`backward`] runs one reverse sweep over the tape, visiting each node
//! exactly once and accumulating gradients into the leaves.
//!
//! Tapes are single-threaded; independent tapes may run concurrently on
//! disjoint data.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, sigmoid, swish, Shape, Tensor};
use std::cell::RefCell;
use std::rc::Rc;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Affine { x: usize, w: usize, b: usize },
    Sum(usize),
    Mean(usize),
    Square(usize),
    Swish(usize),
    Relu(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Concat(usize, usize),
    Slice { input: usize, start: usize, len: usize },
    Scale { input: usize, factor: f64 },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

impl TapeInner {
    fn push(&mut self, value: Tensor, op: Op) -> usize {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }
}

/// Recording tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input value. Leaves are the only nodes that receive
    /// gradients from [`Gradients::get`].
    pub fn leaf(&self, value: Tensor) -> Var {
        let idx = self.inner.borrow_mut().push(value, Op::Leaf);
        Var { tape: self.clone(), idx }
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let idx = self.inner.borrow_mut().push(value, op);
        Var { tape: self.clone(), idx }
    }
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl Var {
    pub fn tape_handle(&self) -> Tape {
        self.tape.clone()
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    pub fn shape(&self) -> Shape {
        self.tape.inner.borrow().nodes[self.idx].value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn is_finite(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].value.is_finite()
    }

    fn same_tape(&self, other: &Var) {
        debug_assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "vars must share a tape"
        );
    }

    fn binary(
        &self,
        other: &Var,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        self.same_tape(other);
        let value = {
            let inner = self.tape.inner.borrow();
            f(&inner.nodes[self.idx].value, &inner.nodes[other.idx].value)?
        };
        Ok(self.tape.push(value, op(self.idx, other.idx)))
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Tensor, op: impl FnOnce(usize) -> Op) -> Var {
        let value = {
            let inner = self.tape.inner.borrow();
            f(&inner.nodes[self.idx].value)
        };
        self.tape.push(value, op(self.idx))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a.add(b), Op::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a.sub(b), Op::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a.mul(b), Op::Mul)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a.div(b), Op::Div)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a.matmul(b), Op::Matmul)
    }

    /// `self·w + b`, recorded as one fused node.
    pub fn affine(&self, w: &Var, b: &Var) -> Result<Var> {
        self.same_tape(w);
        self.same_tape(b);
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx]
                .value
                .affine(&inner.nodes[w.idx].value, &inner.nodes[b.idx].value)?
        };
        Ok(self.tape.push(value, Op::Affine { x: self.idx, w: w.idx, b: b.idx }))
    }

    pub fn sum(&self) -> Var {
        self.unary(|t| Tensor::scalar(t.sum()), Op::Sum)
    }

    pub fn mean(&self) -> Var {
        self.unary(|t| Tensor::scalar(t.mean()), Op::Mean)
    }

    pub fn square(&self) -> Var {
        self.unary(|t| t.map(|v| v * v), Op::Square)
    }

    pub fn swish(&self) -> Var {
        self.unary(|t| t.map(swish), Op::Swish)
    }

    pub fn relu(&self) -> Var {
        self.unary(|t| t.map(|v| v.max(0.0)), Op::Relu)
    }

    pub fn tanh(&self) -> Var {
        self.unary(|t| t.map(f64::tanh), Op::Tanh)
    }

    pub fn sin(&self) -> Var {
        self.unary(|t| t.map(f64::sin), Op::Sin)
    }

    pub fn cos(&self) -> Var {
        self.unary(|t| t.map(f64::cos), Op::Cos)
    }

    pub fn exp(&self) -> Var {
        self.unary(|t| t.map(f64::exp), Op::Exp)
    }

    pub fn concat(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a.concat(b), Op::Concat)
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].value.slice(start, len)?
        };
        Ok(self.tape.push(value, Op::Slice { input: self.idx, start, len }))
    }

    pub fn scale(&self, factor: f64) -> Var {
        self.unary(|t| t.scale(factor), |input| Op::Scale { input, factor })
    }

    pub fn reshape(&self, shape: Shape) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].value.reshape(shape)?
        };
        Ok(self.tape.push(value, Op::Reshape(self.idx)))
    }
}

/// Gradient of the root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// ∂root/∂var; zero for leaves the root does not reach.
    pub fn get(&self, var: &Var) -> Tensor {
        match &self.grads[var.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.idx]),
        }
    }

    pub fn sq_norm(&self, vars: &[Var]) -> f64 {
        vars.iter().map(|v| self.get(v).sq_norm()).sum()
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Reduce a gradient expressed in the output's shape back to an input's
/// shape, summing over broadcast dimensions.
fn reduce_to(g: Tensor, target: Shape) -> Tensor {
    if g.shape() == target {
        return g;
    }
    match (g.shape(), target) {
        (_, Shape::Scalar) => Tensor::scalar(g.sum()),
        (Shape::Matrix(_, c), Shape::Vector(n)) if c == n => g.col_sum(),
        (got, want) => panic!("cannot reduce gradient {got:?} to {want:?}"),
    }
}

/// Run the reverse sweep from a scalar root.
pub fn backward(root: &Var) -> Result<Gradients> {
    let inner = root.tape.inner.borrow();
    let nodes = &inner.nodes;
    let root_shape = nodes[root.idx].value.shape();
    if root_shape != Shape::Scalar {
        return Err(Error::NonScalarRoot { shape: root_shape });
    }

    let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
    grads[root.idx] = Some(Tensor::scalar(1.0));

    for i in (0..=root.idx).rev() {
        let Some(g) = grads[i].clone() else { continue };
        let val = |j: usize| &nodes[j].value;
        match nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a], reduce_to(g.clone(), val(a).shape()));
                accumulate(&mut grads[b], reduce_to(g, val(b).shape()));
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a], reduce_to(g.clone(), val(a).shape()));
                accumulate(&mut grads[b], reduce_to(g.scale(-1.0), val(b).shape()));
            }
            Op::Mul(a, b) => {
                let ga = g.mul(val(b)).expect("forward-checked shapes");
                let gb = g.mul(val(a)).expect("forward-checked shapes");
                accumulate(&mut grads[a], reduce_to(ga, val(a).shape()));
                accumulate(&mut grads[b], reduce_to(gb, val(b).shape()));
            }
            Op::Div(a, b) => {
                // d(a/b)/da = 1/b, d(a/b)/db = -a/b²
                let ga = g.div(val(b)).expect("forward-checked shapes");
                let gb = g
                    .mul(val(a))
                    .and_then(|t| t.div(val(b)))
                    .and_then(|t| t.div(val(b)))
                    .map(|t| t.scale(-1.0))
                    .expect("forward-checked shapes");
                accumulate(&mut grads[a], reduce_to(ga, val(a).shape()));
                accumulate(&mut grads[b], reduce_to(gb, val(b).shape()));
            }
            Op::Matmul(a, b) => {
                let (ga, gb) = matmul_grads(&g, val(a), val(b));
                accumulate(&mut grads[a], ga);
                accumulate(&mut grads[b], gb);
            }
            Op::Affine { x, w, b } => {
                let (gx, gw) = matmul_grads(&g, val(x), val(w));
                accumulate(&mut grads[x], gx);
                accumulate(&mut grads[w], gw);
                accumulate(&mut grads[b], reduce_to(g.col_sum(), val(b).shape()));
            }
            Op::Sum(a) => {
                accumulate(&mut grads[a], Tensor::full(val(a).shape(), g.item()));
            }
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                accumulate(&mut grads[a], Tensor::full(val(a).shape(), g.item() / n));
            }
            Op::Square(a) => {
                let d = val(a).map(|v| 2.0 * v);
                accumulate(&mut grads[a], g.mul(&d).unwrap());
            }
            Op::Swish(a) => {
                let d = val(a).map(|v| {
                    let s = sigmoid(v);
                    s + v * s * (1.0 - s)
                });
                accumulate(&mut grads[a], g.mul(&d).unwrap());
            }
            Op::Relu(a) => {
                let d = val(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                accumulate(&mut grads[a], g.mul(&d).unwrap());
            }
            Op::Tanh(a) => {
                let d = val(a).map(|v| 1.0 - v.tanh() * v.tanh());
                accumulate(&mut grads[a], g.mul(&d).unwrap());
            }
            Op::Sin(a) => {
                let d = val(a).map(f64::cos);
                accumulate(&mut grads[a], g.mul(&d).unwrap());
            }
            Op::Cos(a) => {
                let d = val(a).map(|v| -v.sin());
                accumulate(&mut grads[a], g.mul(&d).unwrap());
            }
            Op::Exp(a) => {
                let d = nodes[i].value.clone();
                accumulate(&mut grads[a], g.mul(&d).unwrap());
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (ga, gb) = split_concat_grad(&g, sa, sb);
                accumulate(&mut grads[a], ga);
                accumulate(&mut grads[b], gb);
            }
            Op::Slice { input, start, len } => {
                let mut gi = Tensor::zeros(val(input).shape());
                gi.data_mut()[start..start + len].copy_from_slice(g.data());
                accumulate(&mut grads[input], gi);
            }
            Op::Scale { input, factor } => {
                accumulate(&mut grads[input], g.scale(factor));
            }
            Op::Reshape(a) => {
                accumulate(&mut grads[a], g.reshape(val(a).shape()).unwrap());
            }
        }
    }

    let shapes = nodes.iter().map(|n| n.value.shape()).collect();
    Ok(Gradients { grads, shapes })
}

fn reshape_matrix(t: &Tensor, r: usize, c: usize) -> Tensor {
    t.reshape(Shape::Matrix(r, c)).expect("rank-2 view of tape value")
}

/// Gradients of `a·b` for both operands. A left vector acts as a row,
/// a right vector as a column, matching the forward product.
fn matmul_grads(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (Shape::Matrix(m, k), Shape::Matrix(_, n)) => (m, k, n),
        (Shape::Matrix(m, k), Shape::Vector(_)) => (m, k, 1),
        (Shape::Vector(k), Shape::Matrix(_, n)) => (1, k, n),
        _ => unreachable!("matmul forward only accepts these shape pairs"),
    };
    let at = reshape_matrix(a, m, k).transpose();
    let bt = reshape_matrix(b, k, n).transpose();
    let gm = reshape_matrix(g, m, n);
    let ga = Tensor::matrix(m, k, matmul_raw(gm.data(), bt.data(), m, n, k));
    let gb = Tensor::matrix(k, n, matmul_raw(at.data(), gm.data(), k, m, n));
    (
        ga.reshape(a.shape()).unwrap(),
        gb.reshape(b.shape()).unwrap(),
    )
}

fn split_concat_grad(g: &Tensor, sa: Shape, sb: Shape) -> (Tensor, Tensor) {
    match (sa, sb) {
        (Shape::Vector(la), Shape::Vector(lb)) => {
            let ga = Tensor::vector(g.data()[..la].to_vec());
            let gb = Tensor::vector(g.data()[la..la + lb].to_vec());
            (ga, gb)
        }
        (Shape::Matrix(r, ca), Shape::Matrix(_, cb)) => {
            let mut da = Vec::with_capacity(r * ca);
            let mut db = Vec::with_capacity(r * cb);
            let c = ca + cb;
            for i in 0..r {
                da.extend_from_slice(&g.data()[i * c..i * c + ca]);
                db.extend_from_slice(&g.data()[i * c + ca..(i + 1) * c]);
            }
            (Tensor::matrix(r, ca, da), Tensor::matrix(r, cb, db))
        }
        _ => unreachable!("concat forward only accepts vector/matrix pairs"),
    }
}
