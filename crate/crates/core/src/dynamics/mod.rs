//! Random-ODE vector fields of stochastic normalizing flows.
//!
//! An Itô SDE `dZ = μ(Z) dt + σ(Z) dB` driven by a smooth approximation `b(t)`
//! of Brownian motion becomes the ODE
//!
//! ```text
//! dZ/dt = μ(Z) + c(Z) + σ(Z) ḃ(t),   c_i = −½ Σ_j Σ_k ∂_j σ_ik · σ_jk,
//! ```
//!
//! where `c` converts the Itô drift into its Stratonovich counterpart, the
//! form that smooth approximations converge to. Along a fixed path the flow is
//! an ordinary CNF, so its log-density obeys `d log p/dt = −∇·F`.
//!
//! Everything here is evaluated on a batch: rows of `z` are independent
//! states, and rows may each follow their own path.

mod model;
mod probe;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::paths::BrownianApprox;

pub use model::{
    Diffusion, Drift, DriftConvention, ModelVars, ScalarMap, SdeModel, Sigma, Structure,
};
pub use probe::{ProbeKind, TraceProbe};

/// Paths driving a batch: one shared by every row, or one per row.
#[derive(Clone, Copy, Debug)]
pub enum Noise<'a> {
    Shared(&'a BrownianApprox),
    PerRow(&'a [BrownianApprox]),
}

impl<'a> Noise<'a> {
    pub fn from_slice(paths: &'a [BrownianApprox]) -> Self {
        if paths.len() == 1 {
            Noise::Shared(&paths[0])
        } else {
            Noise::PerRow(paths)
        }
    }

    fn first(&self) -> &'a BrownianApprox {
        match *self {
            Noise::Shared(p) => p,
            Noise::PerRow(ps) => &ps[0],
        }
    }

    pub fn dim(&self) -> usize {
        self.first().dim()
    }

    /// Shortest horizon over the paths.
    pub fn horizon(&self) -> f64 {
        match *self {
            Noise::Shared(p) => p.horizon(),
            Noise::PerRow(ps) => ps.iter().map(|p| p.horizon()).fold(f64::INFINITY, f64::min),
        }
    }

    /// Sorted, de-duplicated derivative jump times of all paths.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = match *self {
            Noise::Shared(p) => p.breakpoints().to_vec(),
            Noise::PerRow(ps) => ps.iter().flat_map(|p| p.breakpoints().iter().copied()).collect(),
        };
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// `ḃ(t)` for every row, `rows × m`.
    pub fn rate(&self, t: f64, rows: usize) -> Result<Tensor> {
        let m = self.dim();
        let mut out = Tensor::zeros((rows, m));
        match *self {
            Noise::Shared(p) => {
                let d = p.deriv(t)?;
                for mut r in out.rows_mut() {
                    r.assign(&d);
                }
            }
            Noise::PerRow(ps) => {
                if ps.len() != rows {
                    return Err(invalid(format!("{} paths for {rows} rows", ps.len())));
                }
                for (r, p) in ps.iter().enumerate() {
                    p.deriv_into(t, out.row_mut(r).into_slice().unwrap())?;
                }
            }
        }
        Ok(out)
    }
}

/// How the divergence in the log-density equation is computed.
#[derive(Clone, Copy, Debug)]
pub enum DivMode<'a> {
    /// Full Jacobian trace, one reverse pass per state dimension.
    Exact,
    /// Hutchinson estimate with fixed probes.
    Probe(&'a TraceProbe),
}

/// Settings for field evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Add the Itô-to-Stratonovich correction. Turning it off is only useful
    /// to demonstrate what goes wrong without it.
    pub ito_correction: bool,
    /// Use the exact divergence up to this state dimension, probes above it.
    pub exact_max_dim: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            ito_correction: true,
            exact_max_dim: 8,
        }
    }
}

impl FieldConfig {
    pub fn div_mode<'a>(&self, d: usize, probe: Option<&'a TraceProbe>) -> DivMode<'a> {
        match probe {
            Some(p) if d > self.exact_max_dim => DivMode::Probe(p),
            _ => DivMode::Exact,
        }
    }
}

/// Constant `rows × d` matrix with ones in column `i`.
fn unit_column(rows: usize, d: usize, i: usize) -> Tensor {
    Tensor::from_shape_fn((rows, d), |(_, j)| f64::from(i == j))
}

/// Row-wise divergence `∇_z · f` as an `r × 1` node.
///
/// With `record` the result is differentiable (needed when the divergence
/// itself is differentiated, as in training); otherwise it is a constant.
pub fn divergence<'t>(f: Var<'t>, z: Var<'t>, mode: DivMode<'_>, record: bool) -> Result<Var<'t>> {
    let tape = f.tape();
    let (rows, d) = z.shape();
    if f.shape() != (rows, d) {
        return Err(invalid(format!(
            "divergence needs a square field, got {:?} for state {:?}",
            f.shape(),
            z.shape()
        )));
    }
    match mode {
        DivMode::Exact => {
            if record {
                let mut acc: Option<Var<'t>> = None;
                for i in 0..d {
                    let seed = tape.constant(unit_column(rows, d, i));
                    let g = tape.gradients_graph(f, &[z], Some(seed))?.remove(0).col(i);
                    acc = Some(match acc {
                        None => g,
                        Some(a) => a + g,
                    });
                }
                Ok(acc.unwrap())
            } else {
                let mut acc = Tensor::zeros((rows, 1));
                for i in 0..d {
                    let g = tape.gradients(f, &[z], Some(&unit_column(rows, d, i)))?.remove(0);
                    acc.column_mut(0).scaled_add(1.0, &g.column(i));
                }
                Ok(tape.constant(acc))
            }
        }
        DivMode::Probe(probe) => {
            if probe.rows() != rows || probe.dim() != d {
                return Err(invalid(format!(
                    "probe is {}x{} but the batch is {rows}x{d}",
                    probe.rows(),
                    probe.dim()
                )));
            }
            let k = 1.0 / probe.count() as f64;
            if record {
                let mut acc: Option<Var<'t>> = None;
                for eps in probe.vectors() {
                    let e = tape.constant(eps.clone());
                    let g = tape.gradients_graph(f, &[z], Some(e))?.remove(0).row_dot(e);
                    acc = Some(match acc {
                        None => g,
                        Some(a) => a + g,
                    });
                }
                Ok(acc.unwrap().scale(k))
            } else {
                let mut acc = Tensor::zeros((rows, 1));
                for eps in probe.vectors() {
                    let g = tape.gradients(f, &[z], Some(eps))?.remove(0);
                    let dots = (&g * eps).sum_axis(ndarray::Axis(1));
                    acc.column_mut(0).scaled_add(k, &dots);
                }
                Ok(tape.constant(acc))
            }
        }
    }
}

/// `(F(z, t), −∇·F(z, t))` on the tape, for a state node `z`.
pub fn augmented<'t>(
    vars: &ModelVars<'t>,
    z: Var<'t>,
    t: f64,
    noise: Noise<'_>,
    cfg: &FieldConfig,
    mode: DivMode<'_>,
    record: bool,
) -> Result<(Var<'t>, Var<'t>)> {
    let z = model::ensure_var(z);
    let bdot = noise.rate(t, z.rows())?;
    let f = vars.field(z, t, Some(&bdot), cfg.ito_correction)?;
    let div = divergence(f, z, mode, record)?;
    Ok((f, -div))
}

impl SdeModel {
    /// `σ(z)` at a single state, as a `d × m` matrix.
    pub fn diffusion_matrix(&self, z: &[f64], t: f64) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let vars = self.load(&tape, self.params().as_slice().unwrap(), false)?;
        let zv = self.state_node(&tape, z)?;
        Ok(vars.sigma(zv, t)?.matrix(0))
    }

    /// Itô drift `μ(z)` for a batch.
    pub fn drift_value(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.load(&tape, self.params().as_slice().unwrap(), false)?;
        let zv = tape.var(z.clone());
        let sigma = vars.sigma(zv, t)?;
        Ok(vars.drift_with(zv, t, &sigma)?.to_array())
    }

    /// Correction `μ̃ − μ` for a batch.
    pub fn ito_correction(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.load(&tape, self.params().as_slice().unwrap(), false)?;
        let zv = tape.var(z.clone());
        let sigma = vars.sigma(zv, t)?;
        Ok(match vars.ito_correction(zv, t, &sigma)? {
            Some(c) => c.to_array(),
            None => Tensor::zeros(z.dim()),
        })
    }

    /// Wong–Zakai field `μ + c + σ ḃ(t)` for a batch.
    pub fn wz_field(&self, noise: Noise<'_>, t: f64, z: &Tensor, cfg: &FieldConfig) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.load(&tape, self.params().as_slice().unwrap(), false)?;
        let zv = tape.var(z.clone());
        let bdot = noise.rate(t, z.nrows())?;
        Ok(vars.field(zv, t, Some(&bdot), cfg.ito_correction)?.to_array())
    }

    /// Augmented field on a state `[z | Δlog p]` of shape `r × (d + 1)`.
    pub fn augmented_field(
        &self,
        noise: Noise<'_>,
        probe: Option<&TraceProbe>,
        cfg: &FieldConfig,
        t: f64,
        state: &Tensor,
    ) -> Result<Tensor> {
        let d = self.dim();
        if state.ncols() != d + 1 {
            return Err(invalid(format!("augmented state needs {} columns", d + 1)));
        }
        let tape = Tape::new();
        let vars = self.load(&tape, self.params().as_slice().unwrap(), false)?;
        let z = tape.var(state.slice(ndarray::s![.., ..d]).to_owned());
        let (f, dl) = augmented(&vars, z, t, noise, cfg, cfg.div_mode(d, probe), false)?;
        let mut out = Tensor::zeros(state.dim());
        out.slice_mut(ndarray::s![.., ..d]).assign(&*f.value());
        out.slice_mut(ndarray::s![.., d..]).assign(&*dl.value());
        Ok(out)
    }

    fn state_node<'t>(&self, tape: &'t Tape, z: &[f64]) -> Result<Var<'t>> {
        if z.len() != self.dim() {
            return Err(invalid(format!("state has {} entries, model dimension is {}", z.len(), self.dim())));
        }
        Ok(tape.var(Tensor::from_shape_vec((1, z.len()), z.to_vec()).unwrap()))
    }
}
