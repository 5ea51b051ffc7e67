use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nets::{Checkpoint, MlpSpec, MlpVars, NamedParams};
use crate::targets::Target1d;

/// Drift `μ(z)` of the Itô SDE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Drift {
    Zero,
    Constant { mu: Vec<f64> },
    /// `μ(z) = A z`, with `a` given row by row.
    Linear { a: Vec<Vec<f64>> },
    Net { spec: MlpSpec },
    /// One-dimensional drift that makes the SDE ergodic for `target`, given
    /// the model's own diffusion coefficient.
    Ergodic {
        target: Target1d,
        convention: DriftConvention,
    },
}

/// Which formula builds an ergodic drift from `σ` and the target score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DriftConvention {
    /// `½ σ² (log p)′ + σ σ′`: the stationary zero-flux solution.
    #[default]
    ZeroFlux,
    /// `σ² (log p)′ + ½ σ′`, which for the Cauchy target reads
    /// `−2σ²x/(1+x²) + ½σ′`. Kept for comparison; it is not stationary.
    PaperLiteral,
}

/// Elementwise analytic diffusion `σ_ii(z) = g(z_i)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScalarMap {
    /// `g(x) = c·x`.
    Proportional { c: f64 },
    Sine,
    /// `g(x) = √(1 + x²)`.
    SqrtOnePlusSquare,
}

impl ScalarMap {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            ScalarMap::Proportional { c } => c * x,
            ScalarMap::Sine => x.sin(),
            ScalarMap::SqrtOnePlusSquare => (1.0 + x * x).sqrt(),
        }
    }

    fn apply<'t>(&self, z: Var<'t>) -> Var<'t> {
        match *self {
            ScalarMap::Proportional { c } => z.scale(c),
            ScalarMap::Sine => z.sin(),
            ScalarMap::SqrtOnePlusSquare => z.square().add_scalar(1.0).ln().scale(0.5).exp(),
        }
    }
}

/// Diffusion `σ(z)`, a `d × m` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Diffusion {
    /// Fixed matrix, given row by row.
    Constant { sigma: Vec<Vec<f64>> },
    /// Diagonal with an analytic map per coordinate (`d = m`).
    Diagonal { map: ScalarMap },
    /// Diagonal read off a network with `d` outputs, optionally exponentiated
    /// to keep it positive.
    DiagonalNet { spec: MlpSpec, positive: bool },
    /// `λ [[1, s₁(z)], [s₂(z), 1]]` with `(s₁, s₂)` from a network (`d = m = 2`).
    OffDiag { lambda: f64, spec: MlpSpec },
    /// All `d·m` entries from a network, row-major.
    Full { spec: MlpSpec },
}

/// Sparsity pattern of `σ`, as far as integrators care.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    Constant,
    Diagonal,
    OffDiag,
    Full,
}

/// An Itô SDE with standard-normal initial law and flat parameters
/// `θ = [drift net | diffusion net]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdeModel {
    d: usize,
    m: usize,
    drift: Drift,
    diffusion: Diffusion,
    params: Array1<f64>,
}

impl Drift {
    fn net(&self) -> Option<&MlpSpec> {
        match self {
            Drift::Net { spec } => Some(spec),
            _ => None,
        }
    }
}

impl Diffusion {
    fn net(&self) -> Option<&MlpSpec> {
        match self {
            Diffusion::DiagonalNet { spec, .. } | Diffusion::OffDiag { spec, .. } | Diffusion::Full { spec } => {
                Some(spec)
            }
            _ => None,
        }
    }

    pub fn identity(d: usize) -> Self {
        Diffusion::Constant {
            sigma: (0..d).map(|i| (0..d).map(|j| f64::from(i == j)).collect()).collect(),
        }
    }

    pub fn zero(d: usize, m: usize) -> Self {
        Diffusion::Constant {
            sigma: vec![vec![0.0; m]; d],
        }
    }
}

fn matrix(rows: &[Vec<f64>], r: usize, c: usize, what: &str) -> Result<Tensor> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what} must be {r}x{c}")));
    }
    Ok(Tensor::from_shape_fn((r, c), |(i, j)| rows[i][j]))
}

fn check_net(spec: &MlpSpec, d: usize, out: usize, what: &str) -> Result<()> {
    spec.validate()?;
    if spec.input_width() != d || spec.output_width() != out {
        return Err(Error::Config(format!(
            "{what} network must map {d} inputs to {out} outputs, got {} -> {}",
            spec.input_width(),
            spec.output_width()
        )));
    }
    Ok(())
}

impl SdeModel {
    pub fn new(d: usize, m: usize, drift: Drift, diffusion: Diffusion, params: Array1<f64>) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        match &drift {
            Drift::Zero => {}
            Drift::Constant { mu } => {
                if mu.len() != d {
                    return Err(Error::Config(format!("constant drift needs {d} entries")));
                }
            }
            Drift::Linear { a } => {
                matrix(a, d, d, "linear drift")?;
            }
            Drift::Net { spec } => check_net(spec, d, d, "drift")?,
            Drift::Ergodic { .. } => {
                if d != 1 || m != 1 {
                    return Err(Error::Config("ergodic drift is one-dimensional".into()));
                }
            }
        }
        match &diffusion {
            Diffusion::Constant { sigma } => {
                matrix(sigma, d, m, "constant diffusion")?;
            }
            Diffusion::Diagonal { .. } => {
                if d != m {
                    return Err(Error::Config("diagonal diffusion needs d = m".into()));
                }
            }
            Diffusion::DiagonalNet { spec, .. } => {
                if d != m {
                    return Err(Error::Config("diagonal diffusion needs d = m".into()));
                }
                check_net(spec, d, d, "diffusion")?;
            }
            Diffusion::OffDiag { lambda, spec } => {
                if d != 2 || m != 2 {
                    return Err(Error::Config("off-diagonal diffusion needs d = m = 2".into()));
                }
                if !(*lambda >= 0.0) {
                    return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
                }
                check_net(spec, d, 2, "diffusion")?;
            }
            Diffusion::Full { spec } => check_net(spec, d, d * m, "diffusion")?,
        }
        let n = drift.net().map_or(0, MlpSpec::num_params) + diffusion.net().map_or(0, MlpSpec::num_params);
        if params.len() != n {
            return Err(Error::Config(format!("model has {n} parameters, got {}", params.len())));
        }
        Ok(Self {
            d,
            m,
            drift,
            diffusion,
            params,
        })
    }

    /// Model with freshly initialized network parameters.
    ///
    /// The drift network uses `seed`, the diffusion network `seed + 1`.
    pub fn init(d: usize, m: usize, drift: Drift, diffusion: Diffusion, seed: u64) -> Result<Self> {
        let mut params = Vec::new();
        if let Some(s) = drift.net() {
            params.extend(s.init(seed));
        }
        if let Some(s) = diffusion.net() {
            params.extend(s.init(seed.wrapping_add(1)));
        }
        Self::new(d, m, drift, diffusion, Array1::from(params))
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    pub fn params(&self) -> &Array1<f64> {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Number of leading entries of θ that belong to the drift network.
    pub fn drift_param_count(&self) -> usize {
        self.drift.net().map_or(0, MlpSpec::num_params)
    }

    /// True at every network weight (not bias) in θ.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut out = self.drift.net().map_or_else(Vec::new, crate::nets::weight_mask);
        out.extend(self.diffusion.net().map_or_else(Vec::new, crate::nets::weight_mask));
        out
    }

    pub fn set_params(&mut self, params: Array1<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(invalid(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        self.params = params;
        Ok(())
    }

    pub fn with_params(&self, params: Array1<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(params)?;
        Ok(out)
    }

    pub fn structure(&self) -> Structure {
        match self.diffusion {
            Diffusion::Constant { .. } => Structure::Constant,
            Diffusion::Diagonal { .. } | Diffusion::DiagonalNet { .. } => Structure::Diagonal,
            Diffusion::OffDiag { .. } => Structure::OffDiag,
            Diffusion::Full { .. } if self.d == 1 && self.m == 1 => Structure::Diagonal,
            Diffusion::Full { .. } => Structure::Full,
        }
    }

    /// A model with the same drift and no noise.
    pub fn without_noise(&self) -> Self {
        let k = self.drift_param_count();
        Self {
            d: self.d,
            m: self.m,
            drift: self.drift.clone(),
            diffusion: Diffusion::zero(self.d, self.m),
            params: self.params.slice(ndarray::s![..k]).to_owned(),
        }
    }

    /// Places the model on `tape` with parameters `params` (which must match θ's layout).
    pub fn load<'t>(&self, tape: &'t Tape, params: &[f64], trainable: bool) -> Result<ModelVars<'t>> {
        if params.len() != self.params.len() {
            return Err(invalid(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        let k = self.drift_param_count();
        let drift_net = match self.drift.net() {
            Some(s) => Some(s.load(tape, &params[..k], trainable)?),
            None => None,
        };
        let diffusion_net = match self.diffusion.net() {
            Some(s) => Some(s.load(tape, &params[k..], trainable)?),
            None => None,
        };
        let sigma_const = match &self.diffusion {
            Diffusion::Constant { sigma } => Some(matrix(sigma, self.d, self.m, "constant diffusion")?),
            _ => None,
        };
        let drift_const = match &self.drift {
            Drift::Constant { mu } => Some(Tensor::from_shape_vec((1, self.d), mu.clone()).unwrap()),
            Drift::Linear { a } => Some(matrix(a, self.d, self.d, "linear drift")?),
            _ => None,
        };
        Ok(ModelVars {
            d: self.d,
            m: self.m,
            drift: self.drift.clone(),
            diffusion: self.diffusion.clone(),
            drift_net,
            diffusion_net,
            sigma_const,
            drift_const,
        })
    }
}

/// An [`SdeModel`] whose parameters live on a tape.
pub struct ModelVars<'t> {
    d: usize,
    m: usize,
    drift: Drift,
    diffusion: Diffusion,
    drift_net: Option<MlpVars<'t>>,
    diffusion_net: Option<MlpVars<'t>>,
    sigma_const: Option<Tensor>,
    drift_const: Option<Tensor>,
}

/// `σ(z)` for a batch, stored by structure.
#[derive(Clone, Debug)]
pub enum Sigma<'t> {
    Constant(Tensor),
    /// Diagonal entries, `r × d`. `separable` marks `σ_ii` depending on `z_i` only.
    Diagonal { s: Var<'t>, separable: bool },
    /// Network outputs `(s₁, s₂)`, `r × 2`.
    OffDiag { lambda: f64, s: Var<'t> },
    /// Row-major entries, `r × (d·m)`.
    Full { m: usize, s: Var<'t> },
}

/// Returns `z` if gradients can flow to it, otherwise a differentiable copy.
pub(crate) fn ensure_var(z: Var<'_>) -> Var<'_> {
    if z.requires_grad() {
        z
    } else {
        z.tape().var(z.to_array())
    }
}

fn time_arg(spec: &MlpSpec, t: f64) -> Option<f64> {
    spec.time_input.then_some(t)
}

fn grad_of_sum<'t>(y: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    Ok(z.tape().gradients_graph(y.sum(), &[z], None)?.remove(0))
}

impl<'t> Sigma<'t> {
    /// `σ(z) · v` per row, for `v` of shape `r × m`.
    pub fn times(&self, v: Var<'t>) -> Var<'t> {
        let tape = v.tape();
        match self {
            Sigma::Constant(s) => v.mm(tape.constant(s.clone()), false, true),
            Sigma::Diagonal { s, .. } => *s * v,
            Sigma::OffDiag { lambda, s } => {
                let (s1, s2) = (s.col(0), s.col(1));
                let (v1, v2) = (v.col(0), v.col(1));
                tape.concat_cols(&[v1 + s1 * v2, s2 * v1 + v2]).scale(*lambda)
            }
            Sigma::Full { m, s } => {
                let d = s.cols() / m;
                let parts: Vec<_> = (0..d).map(|i| s.slice_cols(i * m, *m).row_dot(v)).collect();
                tape.concat_cols(&parts)
            }
        }
    }

    /// `σ` at batch row `row`, as a `d × m` matrix.
    pub fn matrix(&self, row: usize) -> Tensor {
        match self {
            Sigma::Constant(s) => s.clone(),
            Sigma::Diagonal { s, .. } => {
                let v = s.value();
                Tensor::from_diag(&v.row(row))
            }
            Sigma::OffDiag { lambda, s } => {
                let v = s.value();
                ndarray::array![[1.0, v[[row, 0]]], [v[[row, 1]], 1.0]] * *lambda
            }
            Sigma::Full { m, s } => {
                let v = s.value();
                let d = v.ncols() / m;
                Tensor::from_shape_fn((d, *m), |(i, k)| v[[row, i * m + k]])
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Sigma::Constant(_))
    }
}

impl<'t> ModelVars<'t> {
    /// Parameter nodes in θ order.
    pub fn params(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        if let Some(n) = &self.drift_net {
            out.extend(n.vars());
        }
        if let Some(n) = &self.diffusion_net {
            out.extend(n.vars());
        }
        out
    }

    /// Packs gradients for [`ModelVars::params`] into a flat θ-shaped vector.
    pub fn flatten(&self, grads: &[Tensor]) -> Array1<f64> {
        grads.iter().flat_map(|g| g.iter().copied()).collect()
    }

    pub fn sigma(&self, z: Var<'t>, t: f64) -> Result<Sigma<'t>> {
        if z.cols() != self.d {
            return Err(invalid(format!("state has {} columns, model dimension is {}", z.cols(), self.d)));
        }
        let net_out = |spec: &MlpSpec| -> Result<Var<'t>> {
            self.diffusion_net.as_ref().unwrap().forward(z, time_arg(spec, t))
        };
        Ok(match &self.diffusion {
            Diffusion::Constant { .. } => Sigma::Constant(self.sigma_const.clone().unwrap()),
            Diffusion::Diagonal { map } => Sigma::Diagonal {
                s: map.apply(z),
                separable: true,
            },
            Diffusion::DiagonalNet { spec, positive } => {
                let s = net_out(spec)?;
                Sigma::Diagonal {
                    s: if *positive { s.exp() } else { s },
                    separable: self.d == 1,
                }
            }
            Diffusion::OffDiag { lambda, spec } => Sigma::OffDiag {
                lambda: *lambda,
                s: net_out(spec)?,
            },
            Diffusion::Full { spec } => Sigma::Full {
                m: self.m,
                s: net_out(spec)?,
            },
        })
    }

    /// Itô drift; `sigma` must have been computed from the same `z`.
    pub fn drift_with(&self, z: Var<'t>, t: f64, sigma: &Sigma<'t>) -> Result<Var<'t>> {
        let tape = z.tape();
        let rows = z.rows();
        Ok(match &self.drift {
            Drift::Zero => tape.constant(Tensor::zeros((rows, self.d))),
            Drift::Constant { .. } => {
                let mu = self.drift_const.as_ref().unwrap();
                tape.constant(mu.broadcast((rows, self.d)).unwrap().to_owned())
            }
            Drift::Linear { .. } => z.mm(tape.constant(self.drift_const.clone().unwrap()), false, true),
            Drift::Net { spec } => self.drift_net.as_ref().unwrap().forward(z, time_arg(spec, t))?,
            Drift::Ergodic { target, convention } => {
                let score = target.score_var(z);
                let (s, ds) = match sigma {
                    Sigma::Constant(c) => {
                        let s = tape.constant(Tensor::from_elem((rows, 1), c[[0, 0]]));
                        (s, None)
                    }
                    Sigma::Diagonal { s, .. } | Sigma::Full { s, .. } => (*s, Some(grad_of_sum(*s, z)?)),
                    Sigma::OffDiag { .. } => unreachable!("validated to be one-dimensional"),
                };
                match convention {
                    DriftConvention::ZeroFlux => {
                        let base = s.square() * score * 0.5;
                        match ds {
                            Some(ds) => base + s * ds,
                            None => base,
                        }
                    }
                    DriftConvention::PaperLiteral => {
                        let base = s.square() * score;
                        match ds {
                            Some(ds) => base + ds * 0.5,
                            None => base,
                        }
                    }
                }
            }
        })
    }

    pub fn drift(&self, z: Var<'t>, t: f64) -> Result<Var<'t>> {
        let z = ensure_var(z);
        let sigma = self.sigma(z, t)?;
        self.drift_with(z, t, &sigma)
    }

    /// `c_i = −½ Σ_j Σ_k ∂_j σ_ik(z) σ_jk(z)`, differentiating only the first
    /// factor. `None` when `σ` is constant.
    ///
    /// `z` must be the (differentiable) node `sigma` was computed from.
    pub fn ito_correction(&self, z: Var<'t>, _t: f64, sigma: &Sigma<'t>) -> Result<Option<Var<'t>>> {
        let tape = z.tape();
        Ok(match sigma {
            Sigma::Constant(_) => None,
            Sigma::Diagonal { s, separable: true } => Some((grad_of_sum(*s, z)? * *s).scale(-0.5)),
            Sigma::Diagonal { s, separable: false } => {
                let parts: Vec<_> = (0..self.d)
                    .map(|i| {
                        let si = s.col(i);
                        Ok(grad_of_sum(si, z)?.col(i) * si)
                    })
                    .collect::<Result<_>>()?;
                Some(tape.concat_cols(&parts).scale(-0.5))
            }
            Sigma::OffDiag { lambda, s } => {
                let (s1, s2) = (s.col(0), s.col(1));
                let g1 = grad_of_sum(s1, z)?;
                let g2 = grad_of_sum(s2, z)?;
                let c1 = g1.col(0) * s1 + g1.col(1);
                let c2 = g2.col(0) + g2.col(1) * s2;
                Some(tape.concat_cols(&[c1, c2]).scale(-0.5 * lambda * lambda))
            }
            Sigma::Full { m, s } => {
                let (d, m) = (self.d, *m);
                // Column k of σ, laid out as an r × d block.
                let cols: Vec<Var<'t>> = (0..m)
                    .map(|k| tape.concat_cols(&(0..d).map(|j| s.col(j * m + k)).collect::<Vec<_>>()))
                    .collect();
                let mut parts = Vec::with_capacity(d);
                for i in 0..d {
                    let mut acc: Option<Var<'t>> = None;
                    for (k, col) in cols.iter().enumerate() {
                        let term = grad_of_sum(s.col(i * m + k), z)?.row_dot(*col);
                        acc = Some(match acc {
                            None => term,
                            Some(a) => a + term,
                        });
                    }
                    parts.push(acc.unwrap());
                }
                Some(tape.concat_cols(&parts).scale(-0.5))
            }
        })
    }

    /// `μ(z) + c(z) + σ(z) ḃ`, with `c` omitted unless `corrected`.
    pub fn field(&self, z: Var<'t>, t: f64, bdot: Option<&Tensor>, corrected: bool) -> Result<Var<'t>> {
        let z = ensure_var(z);
        let tape = z.tape();
        let sigma = self.sigma(z, t)?;
        let mut f = self.drift_with(z, t, &sigma)?;
        if corrected {
            if let Some(c) = self.ito_correction(z, t, &sigma)? {
                f = f + c;
            }
        }
        if let Some(b) = bdot {
            if b.dim() != (z.rows(), self.m) {
                return Err(invalid(format!(
                    "path rate is {:?}, expected {:?}",
                    b.dim(),
                    (z.rows(), self.m)
                )));
            }
            f = f + sigma.times(tape.constant(b.clone()));
        }
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.d
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    d: usize,
    m: usize,
    drift: Drift,
    diffusion: Diffusion,
}

impl SdeModel {
    /// Networks named `drift` and `diffusion`; the rest of the model goes in
    /// the metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let k = self.drift_param_count();
        let mut nets = Vec::new();
        if let Some(spec) = self.drift.net() {
            nets.push(NamedParams {
                name: "drift".into(),
                spec: spec.clone(),
                params: self.params.slice(ndarray::s![..k]).to_vec(),
            });
        }
        if let Some(spec) = self.diffusion.net() {
            nets.push(NamedParams {
                name: "diffusion".into(),
                spec: spec.clone(),
                params: self.params.slice(ndarray::s![k..]).to_vec(),
            });
        }
        let meta = ModelMeta {
            d: self.d,
            m: self.m,
            drift: self.drift.clone(),
            diffusion: self.diffusion.clone(),
        };
        Checkpoint {
            nets,
            meta: serde_json::to_value(meta).expect("model metadata serializes"),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ckpt.meta.clone()).map_err(|e| invalid(format!("checkpoint metadata: {e}")))?;
        let mut params = Vec::new();
        for (name, spec) in [("drift", meta.drift.net()), ("diffusion", meta.diffusion.net())] {
            let Some(spec) = spec else { continue };
            let net = ckpt.net(name).ok_or_else(|| invalid(format!("checkpoint has no `{name}` network")))?;
            if &net.spec != spec {
                return Err(invalid(format!("`{name}` network does not match the model description")));
            }
            params.extend_from_slice(&net.params);
        }
        Self::new(meta.d, meta.m, meta.drift, meta.diffusion, Array1::from(params))
    }
}
