//! Target distributions and the one-dimensional ergodic SDE family.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::Var;
use crate::dynamics::DriftConvention;
use crate::error::{invalid, Error, Result};

/// Log-density of the banana distribution: `x ~ N(0, 1)`, `x² + y ~ N(0, 2)`.
pub fn banana_logdensity(x: f64, y: f64) -> f64 {
    let u = x * x + y;
    -0.5 * (x * x + 0.5 * u * u) - (2.0 * PI * 2f64.sqrt()).ln()
}

pub fn banana_sample<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let x: f64 = rng.sample(StandardNormal);
    let u: f64 = 2f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
    (x, u - x * x)
}

/// Mean radius of the star at angle `theta`.
pub fn star_radius(theta: f64) -> f64 {
    2.0 / (1.0 + 0.5 * (10.0 * theta).sin()).sqrt()
}

pub const STAR_RADIUS_SD: f64 = 0.15;

/// `θ ~ U(−π, π)`, `r | θ ~ N(star_radius(θ), 9/400)`.
pub fn star_sample<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let theta = rng.random_range(-PI..PI);
    let r = star_radius(theta) + STAR_RADIUS_SD * rng.sample::<f64, _>(StandardNormal);
    (r * theta.cos(), r * theta.sin())
}

/// Star log-density from the polar construction, `log N(r; m(θ), s²) − log(2πr)`.
///
/// The normalization is approximate: it ignores the (negligible) mass the
/// radial normal puts on `r < 0`.
pub fn star_logdensity(x: f64, y: f64) -> f64 {
    let r = x.hypot(y);
    let theta = y.atan2(x);
    let z = (r - star_radius(theta)) / STAR_RADIUS_SD;
    -0.5 * z * z - STAR_RADIUS_SD.ln() - 0.5 * (2.0 * PI).ln() - (2.0 * PI * r).ln()
}

pub fn cauchy_logdensity(x: f64) -> f64 {
    -(1.0 + x * x).ln() - PI.ln()
}

/// Two-dimensional data sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target2d {
    Banana,
    Star,
}

impl Target2d {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        match self {
            Target2d::Banana => banana_sample(rng),
            Target2d::Star => star_sample(rng),
        }
    }

    /// `n × 2` matrix of independent draws.
    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let mut out = Array2::zeros((n, 2));
        for mut row in out.rows_mut() {
            let (x, y) = self.sample(rng);
            row[0] = x;
            row[1] = y;
        }
        out
    }

    pub fn logdensity(&self, x: f64, y: f64) -> f64 {
        match self {
            Target2d::Banana => banana_logdensity(x, y),
            Target2d::Star => star_logdensity(x, y),
        }
    }
}

/// One-dimensional targets for ergodic diffusions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target1d {
    Cauchy,
    StandardNormal,
}

impl Target1d {
    pub fn logdensity(&self, x: f64) -> f64 {
        match self {
            Target1d::Cauchy => cauchy_logdensity(x),
            Target1d::StandardNormal => -0.5 * x * x - 0.5 * (2.0 * PI).ln(),
        }
    }

    /// `(log p)′(x)`.
    pub fn score(&self, x: f64) -> f64 {
        match self {
            Target1d::Cauchy => -2.0 * x / (1.0 + x * x),
            Target1d::StandardNormal => -x,
        }
    }

    /// [`Target1d::score`] on a tape.
    pub fn score_var<'t>(&self, x: Var<'t>) -> Var<'t> {
        match self {
            Target1d::Cauchy => (x * x.square().add_scalar(1.0).recip()).scale(-2.0),
            Target1d::StandardNormal => -x,
        }
    }

    /// Log-density on a tape.
    pub fn logdensity_var<'t>(&self, x: Var<'t>) -> Var<'t> {
        match self {
            Target1d::Cauchy => x.square().add_scalar(1.0).ln().scale(-1.0).add_scalar(-PI.ln()),
            Target1d::StandardNormal => x.square().scale(-0.5).add_scalar(-0.5 * (2.0 * PI).ln()),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Target1d::Cauchy => 0.5 + x.atan() / PI,
            Target1d::StandardNormal => 0.5 * statrs::function::erf::erfc(-x / 2f64.sqrt()),
        }
    }
}

/// A normalized density, evaluated row-wise on `rows × dim` batches.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    fn logdensity_rows(&self, z: &Array2<f64>) -> Array1<f64>;

    /// `∇ log p` per row. The default is a central difference.
    fn score_rows(&self, z: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(z.dim());
        for j in 0..z.ncols() {
            let mut up = z.clone();
            let mut dn = z.clone();
            up.column_mut(j).mapv_inplace(|v| v + h);
            dn.column_mut(j).mapv_inplace(|v| v - h);
            let diff = (self.logdensity_rows(&up) - self.logdensity_rows(&dn)) / (2.0 * h);
            out.column_mut(j).assign(&diff);
        }
        out
    }
}

impl LogDensity for Target1d {
    fn dim(&self) -> usize {
        1
    }

    fn logdensity_rows(&self, z: &Array2<f64>) -> Array1<f64> {
        z.column(0).mapv(|x| self.logdensity(x))
    }

    fn score_rows(&self, z: &Array2<f64>) -> Array2<f64> {
        z.mapv(|x| self.score(x))
    }
}

impl LogDensity for Target2d {
    fn dim(&self) -> usize {
        2
    }

    fn logdensity_rows(&self, z: &Array2<f64>) -> Array1<f64> {
        z.rows().into_iter().map(|r| self.logdensity(r[0], r[1])).collect()
    }

    fn score_rows(&self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Target2d::Banana => {
                let mut out = Array2::zeros(z.dim());
                for (mut o, r) in out.rows_mut().into_iter().zip(z.rows()) {
                    let u = r[0] * r[0] + r[1];
                    o[0] = -r[0] - u * r[0];
                    o[1] = -0.5 * u;
                }
                out
            }
            Target2d::Star => {
                let h = 1e-6;
                Array2::from_shape_fn(z.dim(), |(i, j)| {
                    let (x, y) = (z[[i, 0]], z[[i, 1]]);
                    let (dx, dy) = if j == 0 { (h, 0.0) } else { (0.0, h) };
                    (self.logdensity(x + dx, y + dy) - self.logdensity(x - dx, y - dy)) / (2.0 * h)
                })
            }
        }
    }
}

/// Drift making `dZ = μ dt + σ dB` ergodic for a density with score `(log p)′`.
pub fn ergodic_drift_1d(
    logp_prime: f64,
    sigma: f64,
    sigma_prime: f64,
    convention: DriftConvention,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain {
            t: sigma,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    Ok(match convention {
        DriftConvention::ZeroFlux => 0.5 * sigma * sigma * logp_prime + sigma * sigma_prime,
        DriftConvention::PaperLiteral => sigma * sigma * logp_prime + 0.5 * sigma_prime,
    })
}

/// Largest zero-flux residual `|μ p − ½ (σ² p)′|` over `grid`, with the
/// derivative taken by central differences of step `h`.
pub fn stationarity_check(
    drift: impl Fn(f64) -> f64,
    sigma: impl Fn(f64) -> f64,
    logp: impl Fn(f64) -> f64,
    grid: &[f64],
    h: f64,
) -> f64 {
    let flux = |x: f64| sigma(x).powi(2) * logp(x).exp();
    grid.iter()
        .map(|&x| {
            let d = (flux(x + h) - flux(x - h)) / (2.0 * h);
            (drift(x) * logp(x).exp() - 0.5 * d).abs()
        })
        .fold(0.0, f64::max)
}

/// Kolmogorov–Smirnov distance between the empirical law of `samples` and `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Writes one sample per row under the header `x_1,...,x_d`.
pub fn write_dataset<W: Write>(data: &Array2<f64>, mut w: W) -> Result<()> {
    let header: Vec<String> = (1..=data.ncols()).map(|i| format!("x_{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in data.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Array2<f64>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| invalid("empty dataset"))??;
    let d = header.split(',').count();
    if !header.split(',').enumerate().all(|(i, h)| h.trim() == format!("x_{}", i + 1)) {
        return Err(invalid(format!("unexpected dataset header `{header}`")));
    }
    let mut values = Vec::new();
    let mut n = 0;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| invalid(format!("line {}: {e}", lineno + 2)))?;
        if row.len() != d {
            return Err(invalid(format!("line {}: expected {d} columns", lineno + 2)));
        }
        values.extend(row);
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, d), values).unwrap())
}

#[cfg(test)]
mod tests;
