//! Reverse sweep shared by eager and recorded gradients.
//!
//! Every reverse rule is written once against [`Algebra`]. The eager algebra
//! evaluates rules on plain arrays; the recording algebra emits them as new
//! tape nodes so the resulting gradients are themselves differentiable.

use std::rc::Rc;

use ndarray::{s, Axis, Zip};

use super::tape::{logistic, matmul, pad_cols, Op, Tape, Tensor, Var};
use super::AdError;

pub(crate) trait Algebra {
    type T: Clone;

    fn tape(&self) -> &Tape;
    fn primal(&self, id: usize) -> Self::T;
    fn mm(&self, a: &Self::T, b: &Self::T, ta: bool, tb: bool) -> Self::T;
    fn add(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn scale(&self, a: &Self::T, k: f64) -> Self::T;
    fn add_scalar(&self, a: &Self::T, k: f64) -> Self::T;
    fn recip(&self, a: &Self::T) -> Self::T;
    fn sin(&self, a: &Self::T) -> Self::T;
    fn cos(&self, a: &Self::T) -> Self::T;
    fn sigmoid(&self, a: &Self::T) -> Self::T;
    fn sum_rows(&self, a: &Self::T) -> Self::T;
    fn sum_cols(&self, a: &Self::T) -> Self::T;
    fn broadcast_rows(&self, a: &Self::T, rows: usize) -> Self::T;
    fn broadcast_cols(&self, a: &Self::T, cols: usize) -> Self::T;
    fn slice_cols(&self, a: &Self::T, start: usize, len: usize) -> Self::T;
    fn pad_cols(&self, a: &Self::T, start: usize, total: usize) -> Self::T;
    fn tanh_backward(&self, y: &Self::T, g: &Self::T) -> Self::T;
    fn sigmoid_backward(&self, s: &Self::T, g: &Self::T) -> Self::T;
    /// `g ⊙ sign(x)`; only defined when the result need not be differentiated.
    fn abs_backward(&self, x: &Self::T, g: &Self::T) -> Result<Self::T, AdError>;

    fn neg(&self, a: &Self::T) -> Self::T {
        self.scale(a, -1.0)
    }
}

/// Rules evaluated on arrays.
pub(crate) struct Eager<'a> {
    pub(crate) tape: &'a Tape,
}

type Arr = Rc<Tensor>;

impl Algebra for Eager<'_> {
    type T = Arr;

    fn tape(&self) -> &Tape {
        self.tape
    }
    fn primal(&self, id: usize) -> Arr {
        self.tape.value_of(id)
    }
    fn mm(&self, a: &Arr, b: &Arr, ta: bool, tb: bool) -> Arr {
        Rc::new(matmul(a, b, ta, tb))
    }
    fn add(&self, a: &Arr, b: &Arr) -> Arr {
        Rc::new(&**a + &**b)
    }
    fn mul(&self, a: &Arr, b: &Arr) -> Arr {
        Rc::new(&**a * &**b)
    }
    fn scale(&self, a: &Arr, k: f64) -> Arr {
        Rc::new(a.mapv(|x| k * x))
    }
    fn add_scalar(&self, a: &Arr, k: f64) -> Arr {
        Rc::new(a.mapv(|x| x + k))
    }
    fn recip(&self, a: &Arr) -> Arr {
        Rc::new(a.mapv(f64::recip))
    }
    fn sin(&self, a: &Arr) -> Arr {
        Rc::new(a.mapv(f64::sin))
    }
    fn cos(&self, a: &Arr) -> Arr {
        Rc::new(a.mapv(f64::cos))
    }
    fn sigmoid(&self, a: &Arr) -> Arr {
        Rc::new(a.mapv(logistic))
    }
    fn sum_rows(&self, a: &Arr) -> Arr {
        Rc::new(a.sum_axis(Axis(0)).insert_axis(Axis(0)))
    }
    fn sum_cols(&self, a: &Arr) -> Arr {
        Rc::new(a.sum_axis(Axis(1)).insert_axis(Axis(1)))
    }
    fn broadcast_rows(&self, a: &Arr, rows: usize) -> Arr {
        Rc::new(a.broadcast((rows, a.ncols())).unwrap().to_owned())
    }
    fn broadcast_cols(&self, a: &Arr, cols: usize) -> Arr {
        Rc::new(a.broadcast((a.nrows(), cols)).unwrap().to_owned())
    }
    fn slice_cols(&self, a: &Arr, start: usize, len: usize) -> Arr {
        Rc::new(a.slice(s![.., start..start + len]).to_owned())
    }
    fn pad_cols(&self, a: &Arr, start: usize, total: usize) -> Arr {
        Rc::new(pad_cols(a, start, total))
    }
    fn tanh_backward(&self, y: &Arr, g: &Arr) -> Arr {
        let mut out = (**g).clone();
        Zip::from(&mut out)
            .and(&**y)
            .for_each(|o, &yv| *o *= 1.0 - yv * yv);
        Rc::new(out)
    }
    fn sigmoid_backward(&self, s: &Arr, g: &Arr) -> Arr {
        let mut out = (**g).clone();
        Zip::from(&mut out)
            .and(&**s)
            .for_each(|o, &sv| *o *= sv * (1.0 - sv));
        Rc::new(out)
    }
    fn abs_backward(&self, x: &Arr, g: &Arr) -> Result<Arr, AdError> {
        let mut out = (**g).clone();
        Zip::from(&mut out).and(&**x).for_each(|o, &xv| {
            *o *= if xv > 0.0 {
                1.0
            } else if xv < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        Ok(Rc::new(out))
    }
}

/// Rules emitted as tape nodes.
pub(crate) struct Recording<'t> {
    pub(crate) tape: &'t Tape,
}

impl<'t> Algebra for Recording<'t> {
    type T = Var<'t>;

    fn tape(&self) -> &Tape {
        self.tape
    }
    fn primal(&self, id: usize) -> Var<'t> {
        Var {
            tape: self.tape,
            id,
        }
    }
    fn mm(&self, a: &Var<'t>, b: &Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        a.mm(*b, ta, tb)
    }
    fn add(&self, a: &Var<'t>, b: &Var<'t>) -> Var<'t> {
        *a + *b
    }
    fn mul(&self, a: &Var<'t>, b: &Var<'t>) -> Var<'t> {
        *a * *b
    }
    fn scale(&self, a: &Var<'t>, k: f64) -> Var<'t> {
        a.scale(k)
    }
    fn add_scalar(&self, a: &Var<'t>, k: f64) -> Var<'t> {
        a.add_scalar(k)
    }
    fn recip(&self, a: &Var<'t>) -> Var<'t> {
        a.recip()
    }
    fn sin(&self, a: &Var<'t>) -> Var<'t> {
        a.sin()
    }
    fn cos(&self, a: &Var<'t>) -> Var<'t> {
        a.cos()
    }
    fn sigmoid(&self, a: &Var<'t>) -> Var<'t> {
        a.sigmoid()
    }
    fn sum_rows(&self, a: &Var<'t>) -> Var<'t> {
        a.sum_rows()
    }
    fn sum_cols(&self, a: &Var<'t>) -> Var<'t> {
        a.sum_cols()
    }
    fn broadcast_rows(&self, a: &Var<'t>, rows: usize) -> Var<'t> {
        a.broadcast_rows(rows)
    }
    fn broadcast_cols(&self, a: &Var<'t>, cols: usize) -> Var<'t> {
        a.broadcast_cols(cols)
    }
    fn slice_cols(&self, a: &Var<'t>, start: usize, len: usize) -> Var<'t> {
        a.slice_cols(start, len)
    }
    fn pad_cols(&self, a: &Var<'t>, start: usize, total: usize) -> Var<'t> {
        a.pad_cols(start, total)
    }
    fn tanh_backward(&self, y: &Var<'t>, g: &Var<'t>) -> Var<'t> {
        Var::tanh_backward(*y, *g)
    }
    fn sigmoid_backward(&self, s: &Var<'t>, g: &Var<'t>) -> Var<'t> {
        Var::sigmoid_backward(*s, *g)
    }
    fn abs_backward(&self, _x: &Var<'t>, _g: &Var<'t>) -> Result<Var<'t>, AdError> {
        Err(AdError::Unsupported("abs"))
    }
}

/// Reverse rule of one node: cotangent contributions to each input that lies
/// on a path to a requested gradient.
fn node_vjp<A: Algebra>(
    alg: &A,
    op: &Op,
    out: usize,
    g: &A::T,
    needed: &dyn Fn(usize) -> bool,
) -> Result<Vec<(usize, A::T)>, AdError> {
    let mut acc = Vec::with_capacity(3);
    macro_rules! push {
        ($id:expr, $val:expr) => {
            if needed($id) {
                acc.push(($id, $val));
            }
        };
    }
    match *op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (pa, pb) = (alg.primal(a), alg.primal(b));
            push!(a, {
                if ta {
                    alg.mm(&pb, g, tb, true)
                } else {
                    alg.mm(g, &pb, false, !tb)
                }
            });
            push!(b, {
                if tb {
                    alg.mm(g, &pa, true, ta)
                } else {
                    alg.mm(&pa, g, !ta, false)
                }
            });
        }
        Op::Affine { x, w, b } => {
            let (px, pw) = (alg.primal(x), alg.primal(w));
            push!(x, alg.mm(g, &pw, false, false));
            push!(w, alg.mm(g, &px, true, false));
            push!(b, alg.sum_rows(g));
        }
        Op::Add(a, b) => {
            push!(a, g.clone());
            push!(b, g.clone());
        }
        Op::Sub(a, b) => {
            push!(a, g.clone());
            push!(b, alg.neg(g));
        }
        Op::Mul(a, b) => {
            let (pa, pb) = (alg.primal(a), alg.primal(b));
            push!(a, alg.mul(g, &pb));
            push!(b, alg.mul(g, &pa));
        }
        Op::Scale(a, k) => push!(a, alg.scale(g, k)),
        Op::AddScalar(a) => push!(a, g.clone()),
        Op::Tanh(a) => {
            let y = alg.primal(out);
            push!(a, alg.tanh_backward(&y, g));
        }
        Op::Softplus(a) => {
            let x = alg.primal(a);
            push!(a, alg.mul(g, &alg.sigmoid(&x)));
        }
        Op::Sigmoid(a) => {
            let s = alg.primal(out);
            push!(a, alg.sigmoid_backward(&s, g));
        }
        Op::Exp(a) => {
            let y = alg.primal(out);
            push!(a, alg.mul(g, &y));
        }
        Op::Ln(a) => {
            let x = alg.primal(a);
            push!(a, alg.mul(g, &alg.recip(&x)));
        }
        Op::Recip(a) => {
            let y = alg.primal(out);
            push!(a, alg.neg(&alg.mul(g, &alg.mul(&y, &y))));
        }
        Op::Sin(a) => {
            let x = alg.primal(a);
            push!(a, alg.mul(g, &alg.cos(&x)));
        }
        Op::Cos(a) => {
            let x = alg.primal(a);
            push!(a, alg.neg(&alg.mul(g, &alg.sin(&x))));
        }
        Op::Abs(a) => {
            if needed(a) {
                let x = alg.primal(a);
                acc.push((a, alg.abs_backward(&x, g)?));
            }
        }
        Op::TanhBackward { y, g: gin } => {
            let (py, pg) = (alg.primal(y), alg.primal(gin));
            // d/dy [g (1 - y²)] = -2 y g
            push!(y, alg.scale(&alg.mul(g, &alg.mul(&py, &pg)), -2.0));
            push!(gin, alg.tanh_backward(&py, g));
        }
        Op::SigmoidBackward { s: sid, g: gin } => {
            let (ps, pg) = (alg.primal(sid), alg.primal(gin));
            // d/ds [g s (1 - s)] = g (1 - 2s)
            push!(sid, {
                alg.mul(
                    g,
                    &alg.mul(&pg, &alg.add_scalar(&alg.scale(&ps, -2.0), 1.0)),
                )
            });
            push!(gin, alg.sigmoid_backward(&ps, g));
        }
        Op::SumRows(a) => {
            let rows = alg_rows(alg, a);
            push!(a, alg.broadcast_rows(g, rows));
        }
        Op::SumCols(a) => {
            let cols = alg_cols(alg, a);
            push!(a, alg.broadcast_cols(g, cols));
        }
        Op::BroadcastRows(a) => push!(a, alg.sum_rows(g)),
        Op::BroadcastCols(a) => push!(a, alg.sum_cols(g)),
        Op::SliceCols { a, start } => {
            let total = alg_cols(alg, a);
            push!(a, alg.pad_cols(g, start, total));
        }
        Op::PadCols { a, start } => {
            let len = alg_cols(alg, a);
            push!(a, alg.slice_cols(g, start, len));
        }
        Op::ConcatCols(ref ids) => {
            let mut offset = 0;
            for &id in ids {
                let len = alg_cols(alg, id);
                let start = offset;
                push!(id, alg.slice_cols(g, start, len));
                offset += len;
            }
        }
    }
    Ok(acc)
}

fn alg_rows<A: Algebra>(alg: &A, id: usize) -> usize {
    alg.tape().value_of(id).nrows()
}

fn alg_cols<A: Algebra>(alg: &A, id: usize) -> usize {
    alg.tape().value_of(id).ncols()
}

/// Runs the reverse sweep from `output` seeded with `seed`, returning the
/// accumulated cotangent of each `wrt` node (`None` when unreachable).
pub(crate) fn sweep<A: Algebra>(
    tape: &Tape,
    alg: &A,
    output: usize,
    seed: A::T,
    wrt: &[usize],
) -> Result<Vec<Option<A::T>>, AdError> {
    let mut result: Vec<Option<A::T>> = vec![None; wrt.len()];
    let Some(&lo) = wrt.iter().filter(|&&w| w <= output).min() else {
        return Ok(result);
    };
    let span = output - lo + 1;

    // A node matters only if it descends from some requested input.
    let mut needed = vec![false; span];
    {
        let nodes = tape.nodes.borrow();
        for &w in wrt {
            if w <= output {
                needed[w - lo] = true;
            }
        }
        for i in lo..=output {
            if needed[i - lo] || !nodes[i].requires_grad {
                continue;
            }
            needed[i - lo] = nodes[i]
                .op
                .inputs()
                .iter()
                .any(|&j| j >= lo && needed[j - lo]);
        }
    }
    if !needed[output - lo] {
        return Ok(result);
    }
    let is_needed = |id: usize| id >= lo && needed[id - lo];

    let mut adj: Vec<Option<A::T>> = vec![None; span];
    adj[output - lo] = Some(seed);
    for i in (lo..=output).rev() {
        let Some(g) = adj[i - lo].take() else {
            continue;
        };
        for (k, &w) in wrt.iter().enumerate() {
            if w == i {
                result[k] = Some(g.clone());
            }
        }
        let op = tape.op_of(i);
        for (j, contrib) in node_vjp(alg, &op, i, &g, &is_needed)? {
            let slot = &mut adj[j - lo];
            *slot = Some(match slot.take() {
                Some(prev) => alg.add(&prev, &contrib),
                None => contrib,
            });
        }
    }
    Ok(result)
}
