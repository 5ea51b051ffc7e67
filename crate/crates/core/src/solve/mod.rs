//! ODE integrators for the random flows, and reference SDE schemes.
//!
//! States are `rows × cols` matrices so a whole batch integrates in one call.
//! Reverse-time solves (`t1 < t0`) run the negated field forward in
//! `τ = |t − t0|`, so there is a single integrator core.

mod dopri;

use std::io::Write;

use ndarray::{s, Array1};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor};
use crate::dynamics::{FieldConfig, Noise, SdeModel, Sigma, TraceProbe};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    /// Classical fourth-order Runge–Kutta with `steps` equal steps over the span
    /// (plus any knots that fall between them).
    Rk4 { steps: usize },
    /// Dormand–Prince 5(4) with local error control.
    Adaptive { rtol: f64, atol: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// From `t = 0` to the path horizon.
    #[default]
    Forward,
    /// From the horizon back to `t = 0`.
    Reverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub method: Method,
    pub direction: Direction,
    /// Never step across a derivative jump of the driving path.
    pub align_knots: bool,
    /// Keep every accepted state, not just the last.
    pub save_trajectory: bool,
    pub max_steps: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self::adaptive(1e-6, 1e-6)
    }
}

impl SolveConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: Method::Rk4 { steps },
            direction: Direction::Forward,
            align_knots: true,
            save_trajectory: false,
            max_steps: 1_000_000,
        }
    }

    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Adaptive { rtol, atol },
            ..Self::rk4(1)
        }
    }

    pub fn reverse(mut self) -> Self {
        self.direction = Direction::Reverse;
        self
    }

    pub fn saving(mut self) -> Self {
        self.save_trajectory = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Rk4 { steps } if steps == 0 => Err(Error::Config("rk4 needs at least one step".into())),
            Method::Adaptive { rtol, atol } if !(rtol > 0.0 && atol > 0.0) => {
                Err(Error::Config(format!("tolerances must be positive, got rtol={rtol}, atol={atol}")))
            }
            _ if self.max_steps == 0 => Err(Error::Config("max_steps must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SolveStats {
    pub steps: usize,
    pub rejected: usize,
    pub evals: usize,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Monotone in the direction of integration; the first entry is `t0`.
    pub times: Vec<f64>,
    /// States at `times`. Only the endpoints unless the solve was saving.
    pub states: Vec<Tensor>,
    pub stats: SolveStats,
}

impl Trajectory {
    pub fn last(&self) -> &Tensor {
        self.states.last().unwrap()
    }

    pub fn into_last(mut self) -> Tensor {
        self.states.pop().unwrap()
    }

    fn push(&mut self, t: f64, y: &Tensor, keep: bool) {
        if keep {
            self.times.push(t);
            self.states.push(y.clone());
        }
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// One batch row as CSV: `t,z_1,...,z_d` and a trailing `delta_logp`
    /// column when the states are augmented.
    pub fn write_csv<W: Write>(&self, row: usize, augmented: bool, mut w: W) -> Result<()> {
        let cols = self.last().ncols();
        if row >= self.last().nrows() {
            return Err(invalid(format!("row {row} out of range")));
        }
        let d = if augmented { cols - 1 } else { cols };
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("z_{i}")));
        if augmented {
            header.push("delta_logp".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for (t, y) in self.times.iter().zip(&self.states) {
            let mut cells = vec![t.to_string()];
            cells.extend(y.row(row).iter().map(|v| v.to_string()));
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Step boundaries in `τ`: `[0, span]` split at the knots strictly inside.
fn segments(t0: f64, t1: f64, knots: &[f64]) -> Vec<f64> {
    let span = (t1 - t0).abs();
    let sign = (t1 - t0).signum();
    let tol = 1e-12 * span.max(1.0);
    let mut taus: Vec<f64> = knots
        .iter()
        .map(|&k| (k - t0) * sign)
        .filter(|&tau| tau > tol && tau < span - tol)
        .collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup_by(|a, b| (*a - *b).abs() <= tol);
    let mut out = Vec::with_capacity(taus.len() + 2);
    out.push(0.0);
    out.extend(taus);
    out.push(span);
    out
}

/// One fixed step `[a, b]` in `τ`, lying inside the knot segment `[lo, hi]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FixedStep {
    pub a: f64,
    pub b: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Fixed-step plan for a solve from `t0` to `t1`: `steps` uniform steps in
/// `τ` with segment boundaries snapped in.
pub(crate) struct Schedule {
    pub t0: f64,
    pub sign: f64,
    pub pin: bool,
    pub delta: f64,
    pub steps: Vec<FixedStep>,
}

impl Schedule {
    pub fn new(t0: f64, t1: f64, steps: usize, bounds: &[f64]) -> Self {
        let span = (t1 - t0).abs();
        let h = span / steps as f64;
        let mut out = Vec::new();
        for w in bounds.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let mut grid = vec![lo];
            let mut k = (lo / h).floor() as usize + 1;
            while (k as f64) * h < hi - 1e-9 * h {
                if (k as f64) * h > lo + 1e-9 * h {
                    grid.push(k as f64 * h);
                }
                k += 1;
            }
            grid.push(hi);
            out.extend(grid.windows(2).map(|g| FixedStep { a: g[0], b: g[1], lo, hi }));
        }
        Self {
            t0,
            sign: if t1 >= t0 { 1.0 } else { -1.0 },
            pin: bounds.len() > 2,
            delta: 1e-12 * span,
            steps: out,
        }
    }

    /// Wall time of stage time `tau` within `step`.
    pub fn time(&self, step: &FixedStep, tau: f64) -> f64 {
        let tau = if self.pin {
            tau.clamp(step.lo + self.delta, step.hi - self.delta)
        } else {
            tau
        };
        self.t0 + self.sign * tau
    }
}

/// Segment boundaries in `τ` for a solve under `cfg`.
pub(crate) fn bounds_for(cfg: &SolveConfig, t0: f64, t1: f64, knots: &[f64]) -> Vec<f64> {
    if cfg.align_knots {
        segments(t0, t1, knots)
    } else {
        vec![0.0, (t1 - t0).abs()]
    }
}

/// The field as seen in `τ`, with stage times pinned inside the current segment.
struct Clock<'f, F> {
    field: &'f mut F,
    t0: f64,
    sign: f64,
    lo: f64,
    hi: f64,
    pin: bool,
    delta: f64,
    evals: usize,
}

impl<F> Clock<'_, F>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    fn time(&self, tau: f64) -> f64 {
        self.t0 + self.sign * tau
    }

    fn eval(&mut self, tau: f64, y: &Tensor) -> Result<Tensor> {
        let tau = if self.pin {
            tau.clamp(self.lo + self.delta, self.hi - self.delta)
        } else {
            tau
        };
        self.evals += 1;
        let t = self.time(tau);
        let mut f = (self.field)(t, y)?;
        if f.dim() != y.dim() {
            return Err(invalid(format!("field returned {:?} for a state of {:?}", f.dim(), y.dim())));
        }
        if self.sign < 0.0 {
            f.mapv_inplace(|v| -v);
        }
        Ok(f)
    }
}

fn axpy(y: &Tensor, terms: &[(f64, &Tensor)]) -> Tensor {
    let mut out = y.clone();
    for (a, k) in terms {
        if *a != 0.0 {
            out.scaled_add(*a, k);
        }
    }
    out
}

fn finite(y: &Tensor) -> bool {
    y.iter().all(|v| v.is_finite())
}

/// Integrates `dy/dt = field(t, y)` from `t0` to `t1` (either order).
///
/// With `cfg.align_knots`, `knots` become forced step boundaries and no
/// stage is evaluated across one.
pub fn odesolve<F>(mut field: F, y0: &Tensor, t0: f64, t1: f64, cfg: &SolveConfig, knots: &[f64]) -> Result<Trajectory>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(invalid("solve endpoints must be finite"));
    }
    let span = (t1 - t0).abs();
    let mut traj = Trajectory {
        times: vec![t0],
        states: vec![y0.clone()],
        stats: SolveStats::default(),
    };
    if span == 0.0 {
        return Ok(traj);
    }
    let bounds = bounds_for(cfg, t0, t1, knots);
    let mut clock = Clock {
        field: &mut field,
        t0,
        sign: if t1 >= t0 { 1.0 } else { -1.0 },
        lo: 0.0,
        hi: span,
        pin: bounds.len() > 2,
        delta: 1e-12 * span,
        evals: 0,
    };
    let mut y = y0.clone();
    match cfg.method {
        Method::Rk4 { steps } => {
            let schedule = Schedule::new(t0, t1, steps, &bounds);
            let n = schedule.steps.len();
            for (i, st) in schedule.steps.iter().enumerate() {
                clock.lo = st.lo;
                clock.hi = st.hi;
                let (a, h) = (st.a, st.b - st.a);
                let k1 = clock.eval(a, &y)?;
                let k2 = clock.eval(a + 0.5 * h, &axpy(&y, &[(0.5 * h, &k1)]))?;
                let k3 = clock.eval(a + 0.5 * h, &axpy(&y, &[(0.5 * h, &k2)]))?;
                let k4 = clock.eval(a + h, &axpy(&y, &[(h, &k3)]))?;
                y = axpy(&y, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)]);
                traj.stats.steps += 1;
                let t = clock.time(st.b);
                if !finite(&y) {
                    return Err(Error::Diverged { t });
                }
                if traj.stats.steps > cfg.max_steps {
                    return Err(Error::Stiff { t, dt: h });
                }
                let last = i + 1 == n;
                traj.push(if last { t1 } else { t }, &y, cfg.save_trajectory || last);
            }
        }
        Method::Adaptive { rtol, atol } => {
            dopri::integrate(&mut clock, &mut y, &bounds, rtol, atol, cfg, &mut traj, t1)?;
        }
    }
    traj.stats.evals = clock.evals;
    Ok(traj)
}

/// Runs `f` with `model` loaded on a fresh tape.
fn with_model<T>(model: &SdeModel, f: impl for<'t> FnOnce(&'t Tape, crate::dynamics::ModelVars<'t>) -> Result<T>) -> Result<T> {
    let tape = Tape::new();
    let vars = model.load(&tape, model.params().as_slice().unwrap(), false)?;
    f(&tape, vars)
}

/// Time span `(t0, t1)` of a solve over `[0, T]` in `cfg.direction`.
pub fn span(cfg: &SolveConfig, horizon: f64) -> (f64, f64) {
    match cfg.direction {
        Direction::Forward => (0.0, horizon),
        Direction::Reverse => (horizon, 0.0),
    }
}

/// Solves the Wong–Zakai random ODE for a batch of states `z0` (`rows × d`).
pub fn wz_solve(model: &SdeModel, noise: Noise<'_>, z0: &Tensor, cfg: &SolveConfig, field: &FieldConfig) -> Result<Trajectory> {
    check_state(model, z0, model.dim())?;
    let (t0, t1) = span(cfg, noise.horizon());
    odesolve(|t, z| model.wz_field(noise, t, z, field), z0, t0, t1, cfg, &noise.breakpoints())
}

/// Like [`wz_solve`] on the augmented state `[z | Δlog p]` (`rows × (d + 1)`),
/// whose last column accumulates `−∫ ∇·F dt`.
pub fn wz_solve_augmented(
    model: &SdeModel,
    noise: Noise<'_>,
    state0: &Tensor,
    cfg: &SolveConfig,
    field: &FieldConfig,
    probe: Option<&TraceProbe>,
) -> Result<Trajectory> {
    check_state(model, state0, model.dim() + 1)?;
    let (t0, t1) = span(cfg, noise.horizon());
    odesolve(
        |t, y| model.augmented_field(noise, probe, field, t, y),
        state0,
        t0,
        t1,
        cfg,
        &noise.breakpoints(),
    )
}

fn check_state(model: &SdeModel, y: &Tensor, cols: usize) -> Result<()> {
    if y.ncols() != cols || y.nrows() == 0 {
        return Err(invalid(format!("state is {:?}, expected rows x {cols}", y.dim())));
    }
    let _ = model;
    Ok(())
}

fn check_increments(model: &SdeModel, z0: &Tensor, grid: &[f64], increments: &[Tensor]) -> Result<()> {
    if z0.ncols() != model.dim() {
        return Err(invalid(format!("state has {} columns, model dimension is {}", z0.ncols(), model.dim())));
    }
    if grid.len() < 2 || increments.len() != grid.len() - 1 {
        return Err(invalid(format!("{} increments for a grid of {} points", increments.len(), grid.len())));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("grid must be strictly increasing"));
    }
    for dw in increments {
        let rows_ok = dw.nrows() == 1 || dw.nrows() == z0.nrows();
        if !rows_ok || dw.ncols() != model.noise_dim() {
            return Err(invalid(format!(
                "increment is {:?}, expected 1 x {m} or {} x {m}",
                dw.dim(),
                z0.nrows(),
                m = model.noise_dim()
            )));
        }
    }
    Ok(())
}

fn broadcast(dw: &Tensor, rows: usize) -> Tensor {
    if dw.nrows() == rows {
        dw.clone()
    } else {
        dw.broadcast((rows, dw.ncols())).unwrap().to_owned()
    }
}

/// Itô–Euler scheme `Z ← Z + μ(Z) Δt + σ(Z) ΔB` on `grid`, with one
/// increment matrix per step (`1 × m` shared or `rows × m`).
pub fn euler_maruyama(model: &SdeModel, z0: &Tensor, grid: &[f64], increments: &[Tensor]) -> Result<Tensor> {
    check_increments(model, z0, grid, increments)?;
    let mut z = z0.clone();
    for (w, dw) in grid.windows(2).zip(increments) {
        let (t, dt) = (w[0], w[1] - w[0]);
        z = with_model(model, |tape, vars| {
            let zv = tape.var(z.clone());
            let sigma = vars.sigma(zv, t)?;
            let mu = vars.drift_with(zv, t, &sigma)?;
            let noise = sigma.times(tape.constant(broadcast(dw, z.nrows())));
            Ok(axpy(&z, &[(dt, &mu.to_array()), (1.0, &noise.to_array())]))
        })?;
        if !finite(&z) {
            return Err(Error::Diverged { t: w[1] });
        }
    }
    Ok(z)
}

/// A long Euler–Maruyama run with step `dt` from `z0` (one row per chain).
/// Returns the states after `burn_in` steps and after each of the next
/// `steps`, stacked as `(steps + 1) × rows·d`.
pub fn euler_maruyama_chain<R: rand::Rng + ?Sized>(
    model: &SdeModel,
    z0: &Tensor,
    dt: f64,
    burn_in: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("step must be positive, got {dt}")));
    }
    let (rows, m) = (z0.nrows(), model.noise_dim());
    let width = z0.len();
    let mut out = Tensor::zeros((steps + 1, width));
    let mut z = z0.clone();
    for k in 0..=burn_in + steps {
        if k >= burn_in {
            out.row_mut(k - burn_in).assign(&Array1::from_iter(z.iter().copied()));
        }
        if k == burn_in + steps {
            break;
        }
        let t = k as f64 * dt;
        let dw = Tensor::from_shape_simple_fn((rows, m), || dt.sqrt() * rng.sample::<f64, _>(StandardNormal));
        z = euler_maruyama(model, &z, &[t, t + dt], &[dw])?;
    }
    Ok(out)
}

/// Milstein scheme for diagonal noise: Euler–Maruyama plus
/// `½ σ_ii ∂_i σ_ii (ΔB_i² − Δt)` per channel.
pub fn milstein(model: &SdeModel, z0: &Tensor, grid: &[f64], increments: &[Tensor]) -> Result<Tensor> {
    check_increments(model, z0, grid, increments)?;
    let mut z = z0.clone();
    for (w, dw) in grid.windows(2).zip(increments) {
        let (t, dt) = (w[0], w[1] - w[0]);
        let dw = broadcast(dw, z.nrows());
        z = with_model(model, |tape, vars| {
            let zv = tape.var(z.clone());
            let sigma = vars.sigma(zv, t)?;
            match &sigma {
                Sigma::Constant(_) | Sigma::Diagonal { separable: true, .. } => {}
                Sigma::Full { .. } if model.dim() == 1 && model.noise_dim() == 1 => {}
                _ => {
                    return Err(Error::Unsupported(
                        "Milstein needs diagonal noise with σ_ii depending on z_i only".into(),
                    ))
                }
            }
            let mu = vars.drift_with(zv, t, &sigma)?.to_array();
            let noise = sigma.times(tape.constant(dw.clone())).to_array();
            let mut out = axpy(&z, &[(dt, &mu), (1.0, &noise)]);
            // The Itô correction is −½ σ_ii ∂_i σ_ii.
            if let Some(c) = vars.ito_correction(zv, t, &sigma)? {
                let q = dw.mapv(|b| b * b - dt);
                out.scaled_add(-1.0, &(&c.to_array() * &q));
            }
            Ok(out)
        })?;
        if !finite(&z) {
            return Err(Error::Diverged { t: w[1] });
        }
    }
    Ok(z)
}

/// Splits an augmented state into `(z, Δlog p)`.
pub fn split_augmented(y: &Tensor) -> (Tensor, Tensor) {
    let d = y.ncols() - 1;
    (y.slice(s![.., ..d]).to_owned(), y.slice(s![.., d..]).to_owned())
}

/// `[z | 0]`.
pub fn augment(z: &Tensor) -> Tensor {
    let mut y = Tensor::zeros((z.nrows(), z.ncols() + 1));
    y.slice_mut(s![.., ..z.ncols()]).assign(z);
    y
}

#[cfg(test)]
mod tests;
