use ndarray::{s, Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::density::prior_logdensity;
use crate::dynamics::{augmented, DivMode, FieldConfig, ModelVars, Noise, SdeModel, TraceProbe};
use crate::error::{invalid, Error, Result};
use crate::paths::BrownianApprox;
use crate::solve::{augment, bounds_for, odesolve, span, split_augmented, Direction, Method, Schedule, SolveConfig};
use crate::targets::LogDensity;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// Solve the adjoint system backwards alongside the state.
    #[default]
    Adjoint,
    /// Backpropagate through an unrolled fixed-step RK4 solve.
    Discretize,
}

/// A loss on the end state `[z | Δlog p]` of an augmented solve.
pub trait Terminal: Sync {
    fn direction(&self) -> Direction;

    /// Per-row losses and the gradient of their mean with respect to the end state.
    fn eval(&self, start: &Tensor, end: &Tensor) -> (Array1<f64>, Tensor);
}

/// `−log p_T(x | ω)`, solving back from the data.
#[derive(Clone, Copy, Debug, Default)]
pub struct Nll;

impl Terminal for Nll {
    fn direction(&self) -> Direction {
        Direction::Reverse
    }

    fn eval(&self, _start: &Tensor, end: &Tensor) -> (Array1<f64>, Tensor) {
        let (z0, l) = split_augmented(end);
        let loss = -(prior_logdensity(&z0) - l.column(0));
        let mut grad = end.clone();
        grad.column_mut(z0.ncols()).fill(1.0);
        (loss, grad / end.nrows() as f64)
    }
}

/// `log p_T(Z_T | ω) − log p(Z_T)` for prior draws pushed forward.
#[derive(Clone, Copy)]
pub struct KlTarget<'a>(pub &'a dyn LogDensity);

impl Terminal for KlTarget<'_> {
    fn direction(&self) -> Direction {
        Direction::Forward
    }

    fn eval(&self, start: &Tensor, end: &Tensor) -> (Array1<f64>, Tensor) {
        let (zt, l) = split_augmented(end);
        let loss = prior_logdensity(start) + l.column(0) - self.0.logdensity_rows(&zt);
        let d = zt.ncols();
        let mut grad = Tensor::ones(end.dim());
        grad.slice_mut(s![.., ..d]).assign(&-self.0.score_rows(&zt));
        (loss, grad / end.nrows() as f64)
    }
}

/// One minibatch: start states, their paths and (for large `d`) probes.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub start: &'a Tensor,
    pub noise: Noise<'a>,
    pub probe: Option<&'a TraceProbe>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradSettings {
    pub mode: GradMode,
    pub solve: SolveConfig,
    pub field: FieldConfig,
    /// Tape ceiling for [`GradMode::Discretize`], in bytes.
    pub memory_limit: usize,
}

impl Default for GradSettings {
    fn default() -> Self {
        Self {
            mode: GradMode::Adjoint,
            solve: SolveConfig::default(),
            field: FieldConfig::default(),
            memory_limit: 2 << 30,
        }
    }
}

/// Batch-mean loss and its gradient in θ.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    pub grad: Array1<f64>,
}

fn check_batch(model: &SdeModel, b: &Batch<'_>) -> Result<()> {
    if b.start.nrows() == 0 || b.start.ncols() != model.dim() {
        return Err(invalid(format!("batch is {:?}, model dimension is {}", b.start.dim(), model.dim())));
    }
    if b.noise.dim() != model.noise_dim() {
        return Err(invalid(format!("paths are {}-dimensional, model noise is {}", b.noise.dim(), model.noise_dim())));
    }
    Ok(())
}

/// An augmented field `(F, −∇·F)` with trainable parameters.
pub(crate) trait TapeField: Sync {
    fn dim(&self) -> usize;

    fn num_params(&self) -> usize;

    fn horizon(&self) -> f64;

    fn breakpoints(&self) -> Vec<f64>;

    /// Places the parameters on `tape`.
    fn load<'t>(&'t self, tape: &'t Tape) -> Result<Box<dyn LoadedField<'t> + 't>>;

    /// Plain values on `[z | Δlog p]`.
    fn eval(&self, t: f64, y: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let loaded = self.load(&tape)?;
        let z = tape.var(y.slice(s![.., ..self.dim()]).to_owned());
        let (f, dl) = loaded.record(z, t, false)?;
        Ok(tape.concat_cols(&[f, dl]).to_array())
    }
}

pub(crate) trait LoadedField<'t> {
    /// Parameter nodes, in the order of the flat parameter vector.
    fn params(&self) -> Vec<Var<'t>>;

    /// `(F, −∇·F)` at `z`. With `record` the divergence is differentiable too.
    fn record(&self, z: Var<'t>, t: f64, record: bool) -> Result<(Var<'t>, Var<'t>)>;
}

struct ModelField<'a> {
    model: &'a SdeModel,
    noise: Noise<'a>,
    probe: Option<&'a TraceProbe>,
    field: FieldConfig,
}

struct LoadedModel<'t> {
    vars: ModelVars<'t>,
    noise: Noise<'t>,
    mode: DivMode<'t>,
    field: FieldConfig,
}

impl<'t> LoadedField<'t> for LoadedModel<'t> {
    fn params(&self) -> Vec<Var<'t>> {
        self.vars.params()
    }

    fn record(&self, z: Var<'t>, t: f64, record: bool) -> Result<(Var<'t>, Var<'t>)> {
        augmented(&self.vars, z, t, self.noise, &self.field, self.mode, record)
    }
}

impl TapeField for ModelField<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn horizon(&self) -> f64 {
        self.noise.horizon()
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.noise.breakpoints()
    }

    fn load<'t>(&'t self, tape: &'t Tape) -> Result<Box<dyn LoadedField<'t> + 't>> {
        Ok(Box::new(LoadedModel {
            vars: self.model.load(tape, self.model.params().as_slice().unwrap(), true)?,
            noise: self.noise,
            mode: self.field.div_mode(self.model.dim(), self.probe),
            field: self.field,
        }))
    }

    fn eval(&self, t: f64, y: &Tensor) -> Result<Tensor> {
        self.model.augmented_field(self.noise, self.probe, &self.field, t, y)
    }
}

fn flatten(grads: &[Tensor]) -> Array1<f64> {
    grads.iter().flat_map(|g| g.iter().copied()).collect()
}

/// The field as seen by the unrolled solver, negated when time runs backwards.
fn rk_stage<'t>(loaded: &dyn LoadedField<'t>, d: usize, sign: f64, t: f64, y: Var<'t>) -> Result<Var<'t>> {
    let (fz, dl) = loaded.record(y.slice_cols(0, d), t, true)?;
    let out = y.tape().concat_cols(&[fz, dl]);
    Ok(if sign < 0.0 { -out } else { out })
}

/// Called with the end state of the forward pass; returns per-row losses
/// and the gradient of their mean with respect to the end state.
pub(crate) type EndFn<'a> = dyn FnMut(&Tensor) -> Result<(Array1<f64>, Tensor)> + 'a;

/// A gradient together with `∂L/∂y` at the start of the solve.
pub(crate) struct Pass {
    pub grad: Gradient,
    pub start: Tensor,
}

pub(crate) fn discretize_core(f: &dyn TapeField, start: &Tensor, dir: Direction, end_fn: &mut EndFn<'_>, s: &GradSettings) -> Result<Pass> {
    let steps = match s.solve.method {
        Method::Rk4 { steps } if steps > 0 => steps,
        _ => return Err(Error::Config("discretize mode needs a fixed-step rk4 solve".into())),
    };
    let solve = SolveConfig { direction: dir, ..s.solve };
    let (t0, t1) = span(&solve, f.horizon());
    let bounds = bounds_for(&solve, t0, t1, &f.breakpoints());
    let plan = Schedule::new(t0, t1, steps, &bounds);
    let d = f.dim();

    let tape = Tape::new();
    let loaded = f.load(&tape)?;
    let mut wrt = loaded.params();
    let stage = |t: f64, y| rk_stage(&*loaded, d, plan.sign, t, y);

    let y0 = tape.var(augment(start));
    wrt.push(y0);
    let mut y = y0;
    let base = tape.bytes();
    for (i, st) in plan.steps.iter().enumerate() {
        let (a, h) = (st.a, st.b - st.a);
        let k1 = stage(plan.time(st, a), y)?;
        let k2 = stage(plan.time(st, a + 0.5 * h), y + k1.scale(0.5 * h))?;
        let k3 = stage(plan.time(st, a + 0.5 * h), y + k2.scale(0.5 * h))?;
        let k4 = stage(plan.time(st, a + h), y + k3.scale(h))?;
        y = y + (k1 + k4).scale(h / 6.0) + (k2 + k3).scale(h / 3.0);
        if y.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                t: plan.t0 + plan.sign * st.b,
            });
        }
        let needed = base + (tape.bytes() - base) / (i + 1) * plan.steps.len();
        if needed > s.memory_limit {
            return Err(Error::Resource {
                needed,
                limit: s.memory_limit,
            });
        }
    }

    let (per_row, g) = end_fn(&y.to_array())?;
    let mut grads = tape.gradients(y, &wrt, Some(&g))?;
    let start_grad = grads.pop().unwrap();
    Ok(Pass {
        grad: Gradient {
            loss: per_row.mean().unwrap(),
            grad: flatten(&grads),
        },
        start: start_grad,
    })
}

pub(crate) fn adjoint_core(f: &dyn TapeField, start: &Tensor, dir: Direction, end_fn: &mut EndFn<'_>, s: &GradSettings) -> Result<Pass> {
    let solve = SolveConfig {
        direction: dir,
        save_trajectory: false,
        ..s.solve
    };
    let (t0, t1) = span(&solve, f.horizon());
    let knots = f.breakpoints();
    let end = odesolve(|t, y| f.eval(t, y), &augment(start), t0, t1, &solve, &knots)?.into_last();
    let (per_row, g) = end_fn(&end)?;

    let (r, c) = end.dim();
    let d = f.dim();
    let n = r * c;
    let p = f.num_params();
    let mut packed = Vec::with_capacity(2 * n + p);
    packed.extend(end.iter());
    packed.extend(g.iter());
    packed.resize(2 * n + p, 0.0);
    let packed = Tensor::from_shape_vec((1, 2 * n + p), packed).unwrap();

    let field = |t: f64, state: &Tensor| -> Result<Tensor> {
        let flat = state.as_slice().ok_or_else(|| invalid("adjoint state must be contiguous"))?;
        let y = ArrayView2::from_shape((r, c), &flat[..n]).unwrap();
        let a = ArrayView2::from_shape((r, c), &flat[n..2 * n]).unwrap().to_owned();
        let tape = Tape::new();
        let loaded = f.load(&tape)?;
        let z = tape.var(y.slice(s![.., ..d]).to_owned());
        let (fz, dl) = loaded.record(z, t, true)?;
        let fy = tape.concat_cols(&[fz, dl]);
        let mut wrt = vec![z];
        wrt.extend(loaded.params());
        let grads = tape.gradients(fy, &wrt, Some(&a))?;
        let mut out = Vec::with_capacity(flat.len());
        out.extend(fy.value().iter());
        for row in grads[0].rows() {
            out.extend(row.iter().map(|v| -v));
            out.push(0.0);
        }
        out.extend(grads[1..].iter().flat_map(|g| g.iter().map(|v| -v)));
        Ok(Tensor::from_shape_vec((1, out.len()), out).unwrap())
    };
    let back = odesolve(field, &packed, t1, t0, &solve, &knots)?.into_last();
    let flat = back.as_slice().unwrap();
    Ok(Pass {
        grad: Gradient {
            loss: per_row.mean().unwrap(),
            grad: Array1::from(flat[2 * n..].to_vec()),
        },
        start: Tensor::from_shape_vec((r, c), flat[n..2 * n].to_vec()).unwrap(),
    })
}

fn core(f: &dyn TapeField, start: &Tensor, dir: Direction, end_fn: &mut EndFn<'_>, s: &GradSettings) -> Result<Pass> {
    match s.mode {
        GradMode::Adjoint => adjoint_core(f, start, dir, end_fn, s),
        GradMode::Discretize => discretize_core(f, start, dir, end_fn, s),
    }
}

fn terminal_fn<'a>(loss: &'a dyn Terminal, start: &'a Tensor) -> impl FnMut(&Tensor) -> Result<(Array1<f64>, Tensor)> + 'a {
    move |end| Ok(loss.eval(start, end))
}

fn model_field<'a>(model: &'a SdeModel, batch: &Batch<'a>, s: &GradSettings) -> ModelField<'a> {
    ModelField {
        model,
        noise: batch.noise,
        probe: batch.probe,
        field: s.field,
    }
}

/// Gradient of the batch-mean `loss` by reverse-mode differentiation of an
/// unrolled RK4 solve. Tape memory grows linearly in the step count.
pub fn discretize_grads(model: &SdeModel, batch: Batch<'_>, loss: &dyn Terminal, s: &GradSettings) -> Result<Gradient> {
    check_batch(model, &batch)?;
    let f = model_field(model, &batch, s);
    Ok(discretize_core(&f, batch.start, loss.direction(), &mut terminal_fn(loss, batch.start), s)?.grad)
}

/// Gradient of the batch-mean `loss` from the adjoint equations
/// `ȧ = −a ∂F/∂y`, `ġ = −a ∂F/∂θ`, integrated back from the end of the solve
/// together with the state, using the same solver settings.
pub fn adjoint_grads(model: &SdeModel, batch: Batch<'_>, loss: &dyn Terminal, s: &GradSettings) -> Result<Gradient> {
    check_batch(model, &batch)?;
    let f = model_field(model, &batch, s);
    Ok(adjoint_core(&f, batch.start, loss.direction(), &mut terminal_fn(loss, batch.start), s)?.grad)
}

/// Paths for the marginal estimate of `log p_T(Z_T)`: `k` per row, with row
/// `b` using `paths[b·k .. (b+1)·k]`.
#[derive(Clone, Copy)]
pub struct Marginal<'a> {
    pub target: &'a dyn LogDensity,
    pub paths: &'a [BrownianApprox],
    pub k: usize,
    /// Count the sample's own path in the average. With it the estimate is
    /// an upper bound on the KL divergence, without it a lower bound.
    pub own_path: bool,
    /// Probes for the `rows · k` reverse solves, when the trace is estimated.
    pub probe: Option<&'a TraceProbe>,
}

/// Gradient of `mean_b [LME_j log p_T(Z_T | ω_j) − log p(Z_T)]` for prior draws
/// pushed forward along their own path `ω_0`. The log-mean-exp runs over
/// the `k` extra paths of each row, and over `ω_0` too when
/// [`Marginal::own_path`] is set. Each extra term is a reverse solve from
/// `Z_T`, whose start gradient is pulled back through the forward solve.
pub fn marginal_kl_grads(model: &SdeModel, batch: Batch<'_>, m: Marginal<'_>, s: &GradSettings) -> Result<Gradient> {
    check_batch(model, &batch)?;
    let rows = batch.start.nrows();
    let (d, k) = (model.dim(), m.k);
    if m.target.dim() != d {
        return Err(invalid(format!("target is {}-dimensional, model is {d}", m.target.dim())));
    }
    if k == 0 || m.paths.len() != rows * k {
        return Err(invalid(format!("{} marginal paths for {rows} rows at {k} per row", m.paths.len())));
    }
    let reverse = Noise::PerRow(m.paths);
    if reverse.dim() != model.noise_dim() {
        return Err(invalid(format!("paths are {}-dimensional, model noise is {}", reverse.dim(), model.noise_dim())));
    }
    let fwd = model_field(model, &batch, s);
    let rev = ModelField {
        model,
        noise: reverse,
        probe: m.probe,
        field: s.field,
    };
    let start = batch.start;
    let scale = 1.0 / rows as f64;
    let mut rev_grad = None;
    let mut end_fn = |end: &Tensor| -> Result<(Array1<f64>, Tensor)> {
        let (zt, l) = split_augmented(end);
        let own = prior_logdensity(start) + l.column(0);
        let stacked = Tensor::from_shape_fn((rows * k, d), |(i, j)| zt[[i / k, j]]);
        let mut weights = Array2::<f64>::zeros((rows, k + 1));
        let first = usize::from(!m.own_path);
        let mut lme = Array1::<f64>::zeros(rows);
        let mut rev_end = |e: &Tensor| -> Result<(Array1<f64>, Tensor)> {
            let (z0, lr) = split_augmented(e);
            let terms = prior_logdensity(&z0) - lr.column(0);
            for b in 0..rows {
                let mut row = weights.row_mut(b);
                row[0] = own[b];
                row.slice_mut(s![1..]).assign(&terms.slice(s![b * k..(b + 1) * k]));
                let mut w = row.slice_mut(s![first..]);
                let top = w.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                w.mapv_inplace(|v| (v - top).exp());
                let total = w.sum();
                w /= total;
                lme[b] = top + (total / w.len() as f64).ln();
            }
            let mut g = Tensor::zeros(e.dim());
            for i in 0..rows * k {
                let w = weights[[i / k, 1 + i % k]] * scale;
                let mut row = g.row_mut(i);
                row.slice_mut(s![..d]).assign(&(&z0.row(i) * -w));
                row[d] = -w;
            }
            Ok((terms, g))
        };
        let back = core(&rev, &stacked, Direction::Reverse, &mut rev_end, s)?;
        rev_grad = Some(back.grad.grad);

        let mut g = Tensor::zeros(end.dim());
        for i in 0..rows * k {
            let mut row = g.slice_mut(s![i / k, ..d]);
            row += &back.start.slice(s![i, ..d]);
        }
        g.slice_mut(s![.., ..d]).scaled_add(-scale, &m.target.score_rows(&zt));
        if m.own_path {
            g.column_mut(d).assign(&(&weights.column(0) * scale));
        }
        Ok((lme - m.target.logdensity_rows(&zt), g))
    };
    let mut out = core(&fwd, start, Direction::Forward, &mut end_fn, s)?.grad;
    out.grad += &rev_grad.expect("end callback runs once");
    Ok(out)
}

/// Runs `f` on `shards` contiguous row blocks in parallel and combines the
/// results in order, so the answer does not depend on the thread count.
fn sharded<F>(model: &SdeModel, batch: Batch<'_>, shards: usize, f: F) -> Result<Gradient>
where
    F: Fn(Batch<'_>, usize, usize) -> Result<Gradient> + Sync,
{
    check_batch(model, &batch)?;
    let rows = batch.start.nrows();
    let shards = shards.clamp(1, rows);
    if shards == 1 {
        return f(batch, 0, rows);
    }
    if let Noise::PerRow(ps) = batch.noise {
        if ps.len() != rows {
            return Err(invalid(format!("{} paths for {rows} rows", ps.len())));
        }
    }
    let blocks: Vec<(usize, usize)> = (0..shards)
        .map(|k| (k * rows / shards, (k + 1) * rows / shards))
        .collect();
    let parts: Vec<Result<(usize, Gradient)>> = blocks
        .par_iter()
        .map(|&(lo, hi)| {
            let start = batch.start.slice(s![lo..hi, ..]).to_owned();
            let noise = match batch.noise {
                Noise::Shared(p) => Noise::Shared(p),
                Noise::PerRow(ps) => Noise::PerRow(&ps[lo..hi]),
            };
            let probe = batch.probe.map(|p| p.rows_slice(lo, hi - lo));
            let b = Batch {
                start: &start,
                noise,
                probe: probe.as_ref(),
            };
            Ok((hi - lo, f(b, lo, hi)?))
        })
        .collect();
    let mut out = Gradient {
        loss: 0.0,
        grad: Array1::zeros(model.num_params()),
    };
    for part in parts {
        let (k, g) = part?;
        let w = k as f64 / rows as f64;
        out.loss += w * g.loss;
        out.grad.scaled_add(w, &g.grad);
    }
    Ok(out)
}

/// Dispatches on `s.mode`, running `shards` row blocks in parallel.
pub fn loss_and_grad(model: &SdeModel, batch: Batch<'_>, loss: &dyn Terminal, s: &GradSettings, shards: usize) -> Result<Gradient> {
    sharded(model, batch, shards, |b, _, _| match s.mode {
        GradMode::Adjoint => adjoint_grads(model, b, loss, s),
        GradMode::Discretize => discretize_grads(model, b, loss, s),
    })
}

/// [`marginal_kl_grads`] over `shards` row blocks in parallel.
pub fn marginal_loss_and_grad(model: &SdeModel, batch: Batch<'_>, m: Marginal<'_>, s: &GradSettings, shards: usize) -> Result<Gradient> {
    if m.paths.len() != batch.start.nrows() * m.k {
        return Err(invalid(format!("{} marginal paths for {} rows at {} per row", m.paths.len(), batch.start.nrows(), m.k)));
    }
    sharded(model, batch, shards, |b, lo, hi| {
        let probe = m.probe.map(|p| p.rows_slice(lo * m.k, (hi - lo) * m.k));
        let part = Marginal {
            paths: &m.paths[lo * m.k..hi * m.k],
            probe: probe.as_ref(),
            ..m
        };
        marginal_kl_grads(model, b, part, s)
    })
}
