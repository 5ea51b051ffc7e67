//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations on [`Var`] handles. Gradients come in two
//! flavours:
//!
//! * [`Tape::gradients`] evaluates the reverse sweep on plain arrays.
//! * [`Tape::gradients_graph`] records the reverse sweep on the same tape,
//!   so the returned gradients can be differentiated again
//!   (reverse-over-reverse).
//!
//! Rows of a matrix are treated as independent batch members by every
//! primitive except the explicit row reductions, which is what lets a single
//! reverse sweep produce per-sample input gradients for a whole batch.

mod backward;
mod tape;

use std::rc::Rc;

use thiserror::Error;

use backward::{sweep, Eager, Recording};
pub use tape::{Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("expected a scalar output, found shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("primitive `{0}` cannot be differentiated twice")]
    Unsupported(&'static str),
}

impl Tape {
    /// Cotangents `seedᵀ · ∂output/∂wrt` evaluated on arrays.
    ///
    /// `seed` defaults to all ones. Inputs unreachable from `output` get zeros.
    pub fn gradients(
        &self,
        output: Var<'_>,
        wrt: &[Var<'_>],
        seed: Option<&Tensor>,
    ) -> Result<Vec<Tensor>, AdError> {
        let seed = match seed {
            Some(s) => {
                if s.dim() != output.shape() {
                    return Err(AdError::Shape {
                        expected: output.shape(),
                        found: s.dim(),
                    });
                }
                Rc::new(s.clone())
            }
            None => Rc::new(Tensor::ones(output.shape())),
        };
        let ids: Vec<usize> = wrt.iter().map(|w| w.id).collect();
        let out = sweep(self, &Eager { tape: self }, output.id, seed, &ids)?;
        Ok(out
            .into_iter()
            .zip(wrt)
            .map(|(g, w)| match g {
                Some(g) => Rc::try_unwrap(g).unwrap_or_else(|rc| (*rc).clone()),
                None => Tensor::zeros(w.shape()),
            })
            .collect())
    }

    /// Like [`Tape::gradients`], but the reverse sweep is recorded on this
    /// tape and the results are differentiable nodes.
    pub fn gradients_graph<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        seed: Option<Var<'t>>,
    ) -> Result<Vec<Var<'t>>, AdError> {
        let seed = match seed {
            Some(s) => {
                output.try_same_shape(s)?;
                s
            }
            None => self.constant(Tensor::ones(output.shape())),
        };
        let ids: Vec<usize> = wrt.iter().map(|w| w.id).collect();
        let out = sweep(self, &Recording { tape: self }, output.id, seed, &ids)?;
        Ok(out
            .into_iter()
            .zip(wrt)
            .map(|(g, w)| g.unwrap_or_else(|| self.constant(Tensor::zeros(w.shape()))))
            .collect())
    }
}

/// Marker for functions recorded on a tape, as accepted by [`vjp`], [`grad`]
/// and friends. Any `for<'t> Fn(Var<'t>) -> Result<Var<'t>, AdError>` qualifies.
pub trait TapeFn: for<'t> Fn(Var<'t>) -> Result<Var<'t>, AdError> {}

impl<F> TapeFn for F where F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, AdError> {}

/// Pins a closure to the higher-ranked signature expected by [`TapeFn`].
///
/// Closures stored in a `let` binding otherwise get their lifetimes inferred
/// too narrowly.
pub fn tape_fn<F>(f: F) -> F
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, AdError>,
{
    f
}

/// Evaluates `f(x)` and returns `(f(x), vᵀ ∂f/∂x)`.
pub fn vjp(f: impl TapeFn, x: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor), AdError> {
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(xv)?;
    if y.shape() != v.dim() {
        return Err(AdError::Shape {
            expected: y.shape(),
            found: v.dim(),
        });
    }
    let g = tape.gradients(y, &[xv], Some(v))?.remove(0);
    Ok((y.to_array(), g))
}

/// Value and gradient of a scalar-valued `f` at `x`.
pub fn grad(f: impl TapeFn, x: &Tensor) -> Result<(f64, Tensor), AdError> {
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(xv)?;
    if y.shape() != (1, 1) {
        return Err(AdError::NotScalar(y.shape()));
    }
    let g = tape.gradients(y, &[xv], None)?.remove(0);
    Ok((y.item(), g))
}

/// Gradient of a scalar function whose body may itself take gradients on
/// the tape it is given (via [`Tape::gradients_graph`]).
///
/// This is `grad` under another name: nesting works because the inner
/// gradients are ordinary recorded nodes.
pub fn nested_grad(f: impl TapeFn, x: &Tensor) -> Result<(f64, Tensor), AdError> {
    grad(f, x)
}

/// Hessian-vector product `∇²f(x) · v` for scalar `f`, by differentiating
/// `∇f(x) · v` once more.
pub fn hvp(f: impl TapeFn, x: &Tensor, v: &Tensor) -> Result<Tensor, AdError> {
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(xv)?;
    if y.shape() != (1, 1) {
        return Err(AdError::NotScalar(y.shape()));
    }
    let g = tape.gradients_graph(y, &[xv], None)?.remove(0);
    if g.shape() != v.dim() {
        return Err(AdError::Shape {
            expected: g.shape(),
            found: v.dim(),
        });
    }
    let gv = g.mul_const(v).sum();
    Ok(tape.gradients(gv, &[xv], None)?.remove(0))
}

#[cfg(test)]
mod tests;
