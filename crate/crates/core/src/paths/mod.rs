//! Finite-dimensional approximations of Brownian motion.
//!
//! Two families are provided:
//!
//! * the Karhunen–Loève expansion of a Brownian bridge plus a linear term,
//!   `B(t) = ω₀ t/√T + Σ_{k≥1} ω_k √(2T) sin(kπt/T)/(kπ)`, which is smooth and
//!   whose endpoint `B(T) = ω₀√T` has the exact Brownian law for every
//!   truncation order;
//! * piecewise-linear interpolation of exact Brownian samples on a grid.
//!
//! Both are deterministic functions of a matrix of standard-normal
//! coefficients `omega`, which plays the role of the latent noise vector.

mod rough;

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use rough::{holder_norm, HolderEstimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    KarhunenLoeve,
    PiecewiseLinear,
}

/// A Brownian sample path approximation on `[0, T]` in `m` dimensions.
#[derive(Clone, Debug)]
pub struct BrownianApprox {
    kind: PathKind,
    horizon: f64,
    /// `m × n`: series coefficients (KL) or normalized increments (PL).
    omega: Array2<f64>,
    /// PL only: `0 = t₀ < … < t_n = T`.
    grid: Vec<f64>,
    /// PL only: `m × (n + 1)` cumulative knot values.
    knots: Array2<f64>,
}

fn draw_normals<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((m, n), || rng.sample(StandardNormal))
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(invalid("grid needs at least two times"));
    }
    if grid[0] != 0.0 {
        return Err(invalid("grid must start at 0"));
    }
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(invalid("grid times must be finite"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("grid must be strictly increasing"));
    }
    Ok(())
}

impl BrownianApprox {
    /// Draws a KL path with `n` coefficients per dimension.
    pub fn sample_kl<R: Rng + ?Sized>(m: usize, n: usize, horizon: f64, rng: &mut R) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(invalid(format!("need m, n >= 1 (got m={m}, n={n})")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        Self::from_kl_coeffs(draw_normals(m, n, rng), horizon)
    }

    pub fn from_kl_coeffs(omega: Array2<f64>, horizon: f64) -> Result<Self> {
        if omega.nrows() == 0 || omega.ncols() == 0 {
            return Err(invalid("KL coefficient matrix is empty"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(invalid("non-finite KL coefficient"));
        }
        Ok(Self {
            kind: PathKind::KarhunenLoeve,
            horizon,
            omega,
            grid: Vec::new(),
            knots: Array2::zeros((0, 0)),
        })
    }

    /// Exact Brownian samples on `grid`, linearly interpolated.
    pub fn sample_pl<R: Rng + ?Sized>(m: usize, grid: &[f64], rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(invalid("need m >= 1"));
        }
        check_grid(grid)?;
        Self::from_pl_increments(grid.to_vec(), draw_normals(m, grid.len() - 1, rng))
    }

    /// Uniform grid with `n` intervals on `[0, horizon]`.
    pub fn sample_pl_uniform<R: Rng + ?Sized>(
        m: usize,
        n: usize,
        horizon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 || !(horizon > 0.0) {
            return Err(invalid("need n >= 1 and a positive horizon"));
        }
        let mut grid: Vec<f64> = (0..=n).map(|k| horizon * k as f64 / n as f64).collect();
        grid[n] = horizon;
        Self::sample_pl(m, &grid, rng)
    }

    /// PL path whose increment over `[t_k, t_{k+1}]` is `√Δt_k · omega[:, k]`.
    pub fn from_pl_increments(grid: Vec<f64>, omega: Array2<f64>) -> Result<Self> {
        check_grid(&grid)?;
        if omega.ncols() != grid.len() - 1 || omega.nrows() == 0 {
            return Err(invalid(format!(
                "expected m x {} increments, got {:?}",
                grid.len() - 1,
                omega.dim()
            )));
        }
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(invalid("non-finite increment"));
        }
        let (m, n) = omega.dim();
        let mut knots = Array2::zeros((m, n + 1));
        for k in 0..n {
            let s = (grid[k + 1] - grid[k]).sqrt();
            for i in 0..m {
                knots[[i, k + 1]] = knots[[i, k]] + s * omega[[i, k]];
            }
        }
        Ok(Self {
            kind: PathKind::PiecewiseLinear,
            horizon: grid[n],
            omega,
            grid,
            knots,
        })
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    /// Number of coefficients (KL) or intervals (PL) per dimension.
    pub fn order(&self) -> usize {
        self.omega.ncols()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn omega(&self) -> &Array2<f64> {
        &self.omega
    }

    /// Grid times of a PL path; empty for KL paths.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Times where the derivative jumps (interior PL knots).
    pub fn breakpoints(&self) -> &[f64] {
        if self.grid.len() > 2 {
            &self.grid[1..self.grid.len() - 1]
        } else {
            &[]
        }
    }

    /// KL path keeping only the first `n` coefficients.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if self.kind != PathKind::KarhunenLoeve {
            return Err(invalid("only KL paths can be truncated"));
        }
        if n == 0 || n > self.order() {
            return Err(invalid(format!("truncation order {n} out of 1..={}", self.order())));
        }
        Self::from_kl_coeffs(self.omega.slice(ndarray::s![.., ..n]).to_owned(), self.horizon)
    }

    /// Validates `t` against `[0, T]`, absorbing round-off at the ends.
    fn check_time(&self, t: f64) -> Result<f64> {
        let slack = 1e-10 * self.horizon;
        if t.is_nan() || t < -slack || t > self.horizon + slack {
            return Err(Error::Domain {
                t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    /// Index `k` of the PL segment `[t_k, t_{k+1})` containing `t` (last segment includes `T`).
    fn segment(&self, t: f64) -> usize {
        let n = self.grid.len() - 1;
        self.grid.partition_point(|&g| g <= t).saturating_sub(1).min(n - 1)
    }

    pub fn eval(&self, t: f64) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.dim());
        self.eval_into(t, out.as_slice_mut().unwrap())?;
        Ok(out)
    }

    pub fn deriv(&self, t: f64) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.dim());
        self.deriv_into(t, out.as_slice_mut().unwrap())?;
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let t = self.check_time(t)?;
        match self.kind {
            PathKind::KarhunenLoeve => {
                let big_t = self.horizon;
                let lin = t / big_t.sqrt();
                let c = (2.0 * big_t).sqrt();
                for (i, o) in out.iter_mut().enumerate() {
                    let row = self.omega.row(i);
                    let mut v = row[0] * lin;
                    for k in 1..row.len() {
                        let kp = k as f64 * PI;
                        v += row[k] * c * (kp * t / big_t).sin() / kp;
                    }
                    *o = v;
                }
            }
            PathKind::PiecewiseLinear => {
                let k = self.segment(t);
                let (a, b) = (self.grid[k], self.grid[k + 1]);
                let w = (t - a) / (b - a);
                for (i, o) in out.iter_mut().enumerate() {
                    let (xa, xb) = (self.knots[[i, k]], self.knots[[i, k + 1]]);
                    // Exact at both knots.
                    *o = if w == 0.0 { xa } else if w == 1.0 { xb } else { xa + w * (xb - xa) };
                }
            }
        }
        Ok(())
    }

    /// Time derivative; right-continuous at PL knots.
    pub fn deriv_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let t = self.check_time(t)?;
        match self.kind {
            PathKind::KarhunenLoeve => {
                let big_t = self.horizon;
                let lin = 1.0 / big_t.sqrt();
                let c = (2.0 / big_t).sqrt();
                for (i, o) in out.iter_mut().enumerate() {
                    let row = self.omega.row(i);
                    let mut v = row[0] * lin;
                    for k in 1..row.len() {
                        v += row[k] * c * (k as f64 * PI * t / big_t).cos();
                    }
                    *o = v;
                }
            }
            PathKind::PiecewiseLinear => {
                let k = self.segment(t);
                let dt = self.grid[k + 1] - self.grid[k];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (self.knots[[i, k + 1]] - self.knots[[i, k]]) / dt;
                }
            }
        }
        Ok(())
    }

    /// Path values at `times`, one row per time.
    pub fn sample_at(&self, times: &[f64]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((times.len(), self.dim()));
        for (r, &t) in times.iter().enumerate() {
            self.eval_into(t, out.row_mut(r).into_slice().unwrap())?;
        }
        Ok(out)
    }

    /// Writes `t,b_1,...,b_m` rows at the given times.
    pub fn write_csv<W: Write>(&self, times: &[f64], mut w: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.dim()).map(|i| format!("b_{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        let values = self.sample_at(times)?;
        for (t, row) in times.iter().zip(values.rows()) {
            write!(w, "{t}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Iterated integral `𝕏_{s,t} = ∫_s^t (X_r − X_s) ⊗ dX_r` of the path,
    /// in closed form. `s > t` gives the signed integral.
    pub fn canonical_lift(&self, s: f64, t: f64) -> Result<Array2<f64>> {
        let (xs, xt) = (self.eval(s)?, self.eval(t)?);
        let mut lift = self.area_from_zero(t)? - self.area_from_zero(s)?;
        let dx = &xt - &xs;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                lift[[i, j]] -= xs[i] * dx[j];
            }
        }
        Ok(lift)
    }

    /// `∫_0^t X_r ⊗ dX_r`.
    fn area_from_zero(&self, t: f64) -> Result<Array2<f64>> {
        let t = self.check_time(t)?;
        let m = self.dim();
        let mut out = Array2::zeros((m, m));
        match self.kind {
            PathKind::PiecewiseLinear => {
                // Linear segments: ∫ X dXᵀ = ½ (X_a + X_b) (X_b − X_a)ᵀ.
                let mut add_segment = |xa: &Array1<f64>, xb: &Array1<f64>| {
                    for i in 0..m {
                        for j in 0..m {
                            out[[i, j]] += 0.5 * (xa[i] + xb[i]) * (xb[j] - xa[j]);
                        }
                    }
                };
                let last = self.segment(t);
                for k in 0..last {
                    let xa = self.knots.column(k).to_owned();
                    let xb = self.knots.column(k + 1).to_owned();
                    add_segment(&xa, &xb);
                }
                let xa = self.knots.column(last).to_owned();
                let xt = self.eval(t)?;
                add_segment(&xa, &xt);
            }
            PathKind::KarhunenLoeve => {
                let basis = kl_basis_integrals(self.order(), self.horizon, t);
                out = self.omega.dot(&basis).dot(&self.omega.t());
            }
        }
        Ok(out)
    }

    /// Chen defect `𝕏_{s,t} − 𝕏_{s,u} − 𝕏_{u,t} − (X_u − X_s) ⊗ (X_t − X_u)`.
    pub fn chen_defect(&self, s: f64, u: f64, t: f64) -> Result<Array2<f64>> {
        if !(s <= u && u <= t) {
            return Err(invalid(format!("need s <= u <= t, got ({s}, {u}, {t})")));
        }
        let (xs, xu, xt) = (self.eval(s)?, self.eval(u)?, self.eval(t)?);
        let mut d = self.canonical_lift(s, t)? - self.canonical_lift(s, u)? - self.canonical_lift(u, t)?;
        let m = self.dim();
        for i in 0..m {
            for j in 0..m {
                d[[i, j]] -= (xu[i] - xs[i]) * (xt[j] - xu[j]);
            }
        }
        Ok(d)
    }

    /// `Sym(𝕏_{s,t}) − ½ (X_t − X_s) ⊗ (X_t − X_s)`.
    pub fn geometric_defect(&self, s: f64, t: f64) -> Result<Array2<f64>> {
        if s > t {
            return Err(invalid(format!("need s <= t, got ({s}, {t})")));
        }
        let lift = self.canonical_lift(s, t)?;
        let dx = self.eval(t)? - self.eval(s)?;
        let m = self.dim();
        Ok(Array2::from_shape_fn((m, m), |(i, j)| {
            0.5 * (lift[[i, j]] + lift[[j, i]]) - 0.5 * dx[i] * dx[j]
        }))
    }
}

/// `I[j, l] = ∫_0^t φ_j(r) φ_l'(r) dr` for the KL basis
/// `φ_0 = r/√T`, `φ_k = √(2/T) sin(a_k r)/a_k` with `a_k = kπ/T`.
fn kl_basis_integrals(n: usize, big_t: f64, t: f64) -> Array2<f64> {
    let c = (2.0 / big_t).sqrt();
    let rt = big_t.sqrt();
    let a = |k: usize| k as f64 * PI / big_t;
    Array2::from_shape_fn((n, n), |(j, l)| match (j, l) {
        (0, 0) => t * t / (2.0 * big_t),
        (0, l) => {
            let al = a(l);
            c / rt * (t * (al * t).sin() / al + ((al * t).cos() - 1.0) / (al * al))
        }
        (j, 0) => {
            let aj = a(j);
            c / (aj * rt) * (1.0 - (aj * t).cos()) / aj
        }
        (j, l) if j == l => {
            let aj = a(j);
            c * c * (aj * t).sin().powi(2) / (2.0 * aj * aj)
        }
        (j, l) => {
            let (aj, al) = (a(j), a(l));
            let (p, q) = (aj + al, aj - al);
            c * c / aj * 0.5 * ((1.0 - (p * t).cos()) / p + (1.0 - (q * t).cos()) / q)
        }
    })
}
