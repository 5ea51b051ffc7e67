use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis, Zip};

use super::AdError;

/// Dense row-major matrix used for every tape value. Rows index the batch.
pub type Tensor = Array2<f64>;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    /// `op(a) · op(b)` where `op` optionally transposes.
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    /// `x · wᵀ + b`, with `b` a `1 × out` row broadcast over the batch.
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Softplus(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    Sin(usize),
    Cos(usize),
    Abs(usize),
    /// `g ⊙ (1 − y²)`: reverse rule of tanh, kept as one node.
    TanhBackward {
        y: usize,
        g: usize,
    },
    /// `g ⊙ s ⊙ (1 − s)`: reverse rule of the logistic function.
    SigmoidBackward {
        s: usize,
        g: usize,
    },
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    SliceCols {
        a: usize,
        start: usize,
    },
    PadCols {
        a: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Affine { x, w, b } => vec![*x, *w, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            TanhBackward { y, g } => vec![*y, *g],
            SigmoidBackward { s, g } => vec![*s, *g],
            Scale(a, _)
            | AddScalar(a)
            | Tanh(a)
            | Softplus(a)
            | Sigmoid(a)
            | Exp(a)
            | Ln(a)
            | Recip(a)
            | Sin(a)
            | Cos(a)
            | Abs(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastRows(a)
            | BroadcastCols(a) => vec![*a],
            SliceCols { a, .. } | PadCols { a, .. } => vec![*a],
            ConcatCols(ids) => ids.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Rc<Tensor>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of tensor operations.
///
/// Nodes are numbered in creation order, so every node's inputs precede it
/// and the graph is acyclic by construction. Gradients can be taken either
/// eagerly (plain arrays) or recorded back onto the same tape, which is what
/// makes gradients of gradients possible.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    bytes: Cell<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
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

    /// Bytes held by node values.
    pub fn bytes(&self) -> usize {
        self.bytes.get()
    }

    pub(crate) fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.bytes
            .set(self.bytes.get() + value.len() * std::mem::size_of::<f64>());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Operations whose inputs are all constant fold into a constant leaf.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::from_elem((1, 1), value))
    }

    /// Row vector `1 × n` differentiable input.
    pub fn row_var(&self, values: &[f64]) -> Var<'_> {
        self.var(Tensor::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn op_of(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    /// Concatenates column blocks with matching row counts.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|p| p.requires_grad());
        self.push(
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            out,
            rg,
        )
    }

    /// `x · wᵀ + b` for a batch `x` (`r × in`), weight `w` (`out × in`) and bias `b` (`1 × out`).
    pub fn affine<'t>(&'t self, x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
        let (xv, wv, bv) = (x.value(), w.value(), b.value());
        assert_eq!(xv.ncols(), wv.ncols(), "affine: input width mismatch");
        assert_eq!(bv.shape(), &[1, wv.nrows()], "affine: bias shape mismatch");
        let mut out = xv.dot(&wv.t());
        out += &*bv;
        let rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
        self.push(
            Op::Affine {
                x: x.id,
                w: w.id,
                b: b.id,
            },
            out,
            rg,
        )
    }
}

fn map(v: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    v.mapv(f)
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

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    match (ta, tb) {
        (false, false) => a.dot(b),
        (true, false) => a.t().dot(b),
        (false, true) => a.dot(&b.t()),
        (true, true) => a.t().dot(&b.t()),
    }
}

pub(crate) fn pad_cols(a: &Tensor, start: usize, total: usize) -> Tensor {
    let mut out = Tensor::zeros((a.nrows(), total));
    out.slice_mut(s![.., start..start + a.ncols()]).assign(a);
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    /// Owned copy of the value.
    pub fn to_array(&self) -> Tensor {
        (*self.value()).clone()
    }

    /// Value of a `1 × 1` node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar {:?}", self.shape());
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = map(&self.value(), f);
        self.tape.push(op, out, self.requires_grad())
    }

    fn binary(self, other: Var<'t>, op: Op, out: Tensor) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(op, out, rg)
    }

    /// Copy of this value with no gradient path back to it.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.to_array())
    }

    /// General product `op(self) · op(other)`.
    pub fn mm(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let out = matmul(&self.value(), &other.value(), ta, tb);
        self.binary(
            other,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            out,
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.mm(other, false, false)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |x| k * x)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + k)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), logistic)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip(self.id), f64::recip)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    /// Absolute value. Only first-order gradients pass through it.
    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub(crate) fn tanh_backward(y: Var<'t>, g: Var<'t>) -> Var<'t> {
        let mut out = (*g.value()).clone();
        Zip::from(&mut out)
            .and(&*y.value())
            .for_each(|o, &yv| *o *= 1.0 - yv * yv);
        y.binary(g, Op::TanhBackward { y: y.id, g: g.id }, out)
    }

    pub(crate) fn sigmoid_backward(s: Var<'t>, g: Var<'t>) -> Var<'t> {
        let mut out = (*g.value()).clone();
        Zip::from(&mut out)
            .and(&*s.value())
            .for_each(|o, &sv| *o *= sv * (1.0 - sv));
        s.binary(g, Op::SigmoidBackward { s: s.id, g: g.id }, out)
    }

    /// Column sums, `r × c → 1 × c`.
    pub fn sum_rows(self) -> Var<'t> {
        let out = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape
            .push(Op::SumRows(self.id), out, self.requires_grad())
    }

    /// Row sums, `r × c → r × 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let out = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape
            .push(Op::SumCols(self.id), out, self.requires_grad())
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(self) -> Var<'t> {
        self.sum_cols().sum_rows()
    }

    /// Mean of all entries as a `1 × 1` node.
    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Repeats a `1 × c` row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.nrows(), 1, "broadcast_rows needs a single row");
        let out = v.broadcast((rows, v.ncols())).unwrap().to_owned();
        self.tape
            .push(Op::BroadcastRows(self.id), out, self.requires_grad())
    }

    /// Repeats an `r × 1` column `cols` times.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ncols(), 1, "broadcast_cols needs a single column");
        let out = v.broadcast((v.nrows(), cols)).unwrap().to_owned();
        self.tape
            .push(Op::BroadcastCols(self.id), out, self.requires_grad())
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let out = self.value().slice(s![.., start..start + len]).to_owned();
        self.tape.push(
            Op::SliceCols { a: self.id, start },
            out,
            self.requires_grad(),
        )
    }

    pub fn col(self, j: usize) -> Var<'t> {
        self.slice_cols(j, 1)
    }

    /// Embeds the columns of `self` at `start` inside a zero matrix of width `total`.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        let out = pad_cols(&self.value(), start, total);
        self.tape
            .push(Op::PadCols { a: self.id, start }, out, self.requires_grad())
    }

    /// Per-row inner product, `r × c, r × c → r × 1`.
    pub fn row_dot(self, other: Var<'t>) -> Var<'t> {
        (self * other).sum_cols()
    }

    /// Multiplies each row by the matching entry of an `r × 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let c = self.cols();
        if c == 1 {
            self * col
        } else {
            self * col.broadcast_cols(c)
        }
    }

    /// Multiplies every entry by a `1 × 1` node.
    pub fn mul_scalar_var(self, k: Var<'t>) -> Var<'t> {
        let (r, c) = self.shape();
        self * k.broadcast_rows(r).broadcast_cols(c)
    }

    /// Adds a constant matrix.
    pub fn add_const(self, k: &Tensor) -> Var<'t> {
        self + self.tape.constant(k.clone())
    }

    /// Multiplies elementwise by a constant matrix.
    pub fn mul_const(self, k: &Tensor) -> Var<'t> {
        self * self.tape.constant(k.clone())
    }

    pub fn try_same_shape(self, other: Var<'t>) -> Result<(), AdError> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(AdError::Shape {
                expected: self.shape(),
                found: other.shape(),
            })
        }
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.dim(), b.dim(), "{what}: shape mismatch");
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        check_same(&a, &b, "add");
        self.binary(rhs, Op::Add(self.id, rhs.id), &*a + &*b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        check_same(&a, &b, "sub");
        self.binary(rhs, Op::Sub(self.id, rhs.id), &*a - &*b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        check_same(&a, &b, "mul");
        self.binary(rhs, Op::Mul(self.id, rhs.id), &*a * &*b)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, k: f64) -> Var<'t> {
        self.scale(k)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
