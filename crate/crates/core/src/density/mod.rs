//! Log-densities of stochastic normalizing flows.
//!
//! Conditional on a path `ω` the flow is a CNF. Solving the augmented field
//! backwards from `(x, 0)` at `T` to `(z₀, ℓ)` at 0 gives `ℓ = ∫₀ᵀ ∇·F dt`
//! and `log p_T(x | ω) = log p₀(z₀) − ℓ`. The marginal over paths is
//! estimated by a log-mean-exp over independent paths; the plain mean of the
//! conditionals is a lower bound on it.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::dynamics::{FieldConfig, Noise, ProbeKind, SdeModel, TraceProbe};
use crate::error::{invalid, Error, Result};
use crate::paths::BrownianApprox;
use crate::rng;
use crate::solve::{augment, split_augmented, wz_solve_augmented, Direction, SolveConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    pub solve: SolveConfig,
    pub field: FieldConfig,
    pub probe: ProbeKind,
    pub probe_count: usize,
    /// Seeds the trace probes, one stream per path.
    pub seed: u64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            solve: SolveConfig::adaptive(1e-8, 1e-8),
            field: FieldConfig::default(),
            probe: ProbeKind::Rademacher,
            probe_count: 1,
            seed: 0,
        }
    }
}

impl DensityConfig {
    fn probe_for(&self, rows: usize, d: usize, path_index: u64) -> Result<Option<TraceProbe>> {
        if d <= self.field.exact_max_dim {
            return Ok(None);
        }
        let mut r = rng::stream(self.seed, path_index);
        TraceProbe::sample(self.probe, self.probe_count, rows, d, &mut r).map(Some)
    }
}

/// `log N(z; 0, I)` per row.
pub fn prior_logdensity(z: &Tensor) -> Array1<f64> {
    let d = z.ncols() as f64;
    z.map_axis(Axis(1), |r| -0.5 * r.dot(&r) - 0.5 * d * (2.0 * PI).ln())
}

pub fn prior_sample<R: Rng + ?Sized>(rows: usize, d: usize, rng: &mut R) -> Tensor {
    Tensor::from_shape_simple_fn((rows, d), || rng.sample(StandardNormal))
}

fn estimation(e: Error, what: &str) -> Error {
    if e.is_numerical() {
        Error::Estimation(format!("{what}: {e}"))
    } else {
        e
    }
}

fn check_rows(model: &SdeModel, x: &Tensor) -> Result<()> {
    if x.ncols() != model.dim() || x.nrows() == 0 {
        return Err(invalid(format!("points are {:?}, model dimension is {}", x.dim(), model.dim())));
    }
    Ok(())
}

/// `log p_T(x | ω)` for each row of `x`, with every row driven by `noise`.
pub fn logdensity_single_path(
    model: &SdeModel,
    noise: Noise<'_>,
    x: &Tensor,
    cfg: &DensityConfig,
    probe: Option<&TraceProbe>,
) -> Result<Array1<f64>> {
    check_rows(model, x)?;
    let solve = SolveConfig {
        direction: Direction::Reverse,
        ..cfg.solve
    };
    let y = wz_solve_augmented(model, noise, &augment(x), &solve, &cfg.field, probe)
        .map_err(|e| estimation(e, "reverse solve failed"))?
        .into_last();
    let (z0, l) = split_augmented(&y);
    let out = prior_logdensity(&z0) - l.column(0);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Estimation("non-finite log-density".into()));
    }
    Ok(out)
}

/// Pushes `z0` (drawn from the prior when `None`) forward along `noise`.
/// Returns `(Z_T, log p_T(Z_T | ω))`.
pub fn sample_forward<R: Rng + ?Sized>(
    model: &SdeModel,
    noise: Noise<'_>,
    z0: Option<&Tensor>,
    rows: usize,
    cfg: &DensityConfig,
    probe: Option<&TraceProbe>,
    rng: &mut R,
) -> Result<(Tensor, Array1<f64>)> {
    let z0 = match z0 {
        Some(z) => z.clone(),
        None => prior_sample(rows, model.dim(), rng),
    };
    check_rows(model, &z0)?;
    let solve = SolveConfig {
        direction: Direction::Forward,
        ..cfg.solve
    };
    let y = wz_solve_augmented(model, noise, &augment(&z0), &solve, &cfg.field, probe)
        .map_err(|e| estimation(e, "forward solve failed"))?
        .into_last();
    let (zt, l) = split_augmented(&y);
    Ok((zt, prior_logdensity(&z0) + l.column(0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// `log (1/N) Σ_i p(x | ω_i)`.
    LogMeanExp,
    /// `(1/N) Σ_i log p(x | ω_i)`.
    MeanBound,
}

#[derive(Clone, Debug)]
pub struct DensityEstimate {
    /// `paths × points`, successful paths only.
    pub conditional: Array2<f64>,
    /// One value per point.
    pub aggregate: Array1<f64>,
    pub estimator: Estimator,
    pub paths: usize,
    pub failed: usize,
}

/// Max-shifted `log (1/n) Σ exp(v)`.
pub fn log_mean_exp(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Conditional log-densities of `x` under each path, solved in parallel.
/// Failed paths are dropped and counted; it is an error if all fail.
fn conditionals(model: &SdeModel, paths: &[BrownianApprox], x: &Tensor, cfg: &DensityConfig) -> Result<(Array2<f64>, usize)> {
    check_rows(model, x)?;
    if paths.is_empty() {
        return Err(invalid("need at least one path"));
    }
    let results: Vec<Result<Array1<f64>>> = paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let probe = cfg.probe_for(x.nrows(), model.dim(), i as u64)?;
            logdensity_single_path(model, Noise::Shared(p), x, cfg, probe.as_ref())
        })
        .collect();
    let mut rows = Vec::new();
    let mut last_err = None;
    for r in results {
        match r {
            Ok(v) => rows.push(v),
            Err(e) if e.is_numerical() => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    if rows.is_empty() {
        return Err(Error::Estimation(format!(
            "all {} paths failed; last error: {}",
            paths.len(),
            last_err.unwrap()
        )));
    }
    let failed = paths.len() - rows.len();
    let mut out = Array2::zeros((rows.len(), x.nrows()));
    for (mut o, r) in out.rows_mut().into_iter().zip(rows) {
        o.assign(&r);
    }
    Ok((out, failed))
}

/// Monte Carlo estimate of `log p_T(x)` over `paths`.
pub fn logdensity_mc(model: &SdeModel, paths: &[BrownianApprox], x: &Tensor, cfg: &DensityConfig) -> Result<DensityEstimate> {
    let (conditional, failed) = conditionals(model, paths, x, cfg)?;
    let aggregate = conditional.map_axis(Axis(0), |c| log_mean_exp(c.iter().copied()));
    Ok(DensityEstimate {
        conditional,
        aggregate,
        estimator: Estimator::LogMeanExp,
        paths: paths.len(),
        failed,
    })
}

/// Mean conditional log-density, a lower bound on [`logdensity_mc`].
pub fn elbo_bound(model: &SdeModel, paths: &[BrownianApprox], x: &Tensor, cfg: &DensityConfig) -> Result<DensityEstimate> {
    let (conditional, failed) = conditionals(model, paths, x, cfg)?;
    let aggregate = conditional.mean_axis(Axis(0)).unwrap();
    Ok(DensityEstimate {
        conditional,
        aggregate,
        estimator: Estimator::MeanBound,
        paths: paths.len(),
        failed,
    })
}

/// A regular 2-D grid of evaluation points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl Default for Lattice {
    fn default() -> Self {
        Self {
            x: (-4.0, 4.0),
            y: (-4.0, 4.0),
            nx: 100,
            ny: 100,
        }
    }
}

impl Lattice {
    fn axis(range: (f64, f64), n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (range.0 + range.1)];
        }
        (0..n).map(|i| range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64).collect()
    }

    pub fn xs(&self) -> Vec<f64> {
        Self::axis(self.x, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        Self::axis(self.y, self.ny)
    }

    /// All points, `x` varying fastest.
    pub fn points(&self) -> Tensor {
        let (xs, ys) = (self.xs(), self.ys());
        Tensor::from_shape_fn((self.nx * self.ny, 2), |(k, c)| if c == 0 { xs[k % self.nx] } else { ys[k / self.nx] })
    }

    /// Writes `x,y,logp` rows for `values` laid out as `ny × nx`.
    pub fn write_csv<W: Write>(&self, values: &Array2<f64>, mut w: W) -> Result<()> {
        if values.dim() != (self.ny, self.nx) {
            return Err(invalid(format!("grid values are {:?}, lattice is {}x{}", values.dim(), self.ny, self.nx)));
        }
        writeln!(w, "x,y,logp")?;
        for (j, y) in self.ys().iter().enumerate() {
            for (i, x) in self.xs().iter().enumerate() {
                writeln!(w, "{x},{y},{}", values[[j, i]])?;
            }
        }
        Ok(())
    }
}

/// Log-density estimates on `lattice`, as an `ny × nx` array.
pub fn density_grid(
    model: &SdeModel,
    paths: &[BrownianApprox],
    lattice: &Lattice,
    estimator: Estimator,
    cfg: &DensityConfig,
) -> Result<Array2<f64>> {
    if model.dim() != 2 {
        return Err(invalid("density grids need a two-dimensional model"));
    }
    if lattice.nx == 0 || lattice.ny == 0 {
        return Err(invalid("lattice must have at least one point per axis"));
    }
    let pts = lattice.points();
    let est = match estimator {
        Estimator::LogMeanExp => logdensity_mc(model, paths, &pts, cfg)?,
        Estimator::MeanBound => elbo_bound(model, paths, &pts, cfg)?,
    };
    Ok(est.aggregate.into_shape_with_order((lattice.ny, lattice.nx)).unwrap())
}

#[cfg(test)]
mod tests;
