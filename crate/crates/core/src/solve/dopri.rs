//! Dormand–Prince 5(4) with PI-free step control.

use super::{axpy, finite, Clock, SolveConfig, Trajectory};
use crate::ad::Tensor;
use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0];
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
/// Fifth- minus fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// RMS of `v / (atol + rtol · max(|a|, |b|))`.
fn scaled_norm(v: &Tensor, a: &Tensor, b: &Tensor, rtol: f64, atol: f64) -> f64 {
    let n = v.len() as f64;
    let sum: f64 = v
        .iter()
        .zip(a.iter().zip(b.iter()))
        .map(|(e, (x, y))| {
            let sc = atol + rtol * x.abs().max(y.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn initial_step<F>(clock: &mut Clock<'_, F>, tau: f64, y: &Tensor, f0: &Tensor, rtol: f64, atol: f64) -> Result<f64>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    let d0 = scaled_norm(y, y, y, rtol, atol);
    let d1 = scaled_norm(f0, y, y, rtol, atol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(clock.hi - tau);
    let y1 = axpy(y, &[(h0, f0)]);
    let f1 = clock.eval(tau + h0, &y1)?;
    let d2 = scaled_norm(&(&f1 - f0), y, y, rtol, atol) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok(if h1.is_finite() { (100.0 * h0).min(h1) } else { h0 })
}

#[allow(clippy::too_many_arguments)]
pub(super) fn integrate<F>(
    clock: &mut Clock<'_, F>,
    y: &mut Tensor,
    bounds: &[f64],
    rtol: f64,
    atol: f64,
    cfg: &SolveConfig,
    traj: &mut Trajectory,
    t1: f64,
) -> Result<()>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    let span = *bounds.last().unwrap();
    let hmin = 1e-12 * span;
    let nseg = bounds.len() - 1;
    let mut h: Option<f64> = None;
    for (si, w) in bounds.windows(2).enumerate() {
        let (lo, hi) = (w[0], w[1]);
        clock.lo = lo;
        clock.hi = hi;
        let mut tau = lo;
        // No FSAL reuse across a segment boundary: the slope may jump there.
        let mut k1 = clock.eval(tau, y)?;
        let mut hcur = match h {
            Some(h) => h,
            None => initial_step(clock, tau, y, &k1, rtol, atol)?,
        };
        let mut last_rejected = false;
        while tau < hi {
            let ends = tau + hcur >= hi - 1e-14 * span;
            if ends {
                hcur = hi - tau;
            }
            let k2 = clock.eval(tau + C[1] * hcur, &axpy(y, &[(hcur * A2[0], &k1)]))?;
            let k3 = clock.eval(tau + C[2] * hcur, &axpy(y, &[(hcur * A3[0], &k1), (hcur * A3[1], &k2)]))?;
            let k4 = clock.eval(
                tau + C[3] * hcur,
                &axpy(y, &[(hcur * A4[0], &k1), (hcur * A4[1], &k2), (hcur * A4[2], &k3)]),
            )?;
            let k5 = clock.eval(
                tau + C[4] * hcur,
                &axpy(y, &[(hcur * A5[0], &k1), (hcur * A5[1], &k2), (hcur * A5[2], &k3), (hcur * A5[3], &k4)]),
            )?;
            let k6 = clock.eval(
                tau + C[5] * hcur,
                &axpy(
                    y,
                    &[
                        (hcur * A6[0], &k1),
                        (hcur * A6[1], &k2),
                        (hcur * A6[2], &k3),
                        (hcur * A6[3], &k4),
                        (hcur * A6[4], &k5),
                    ],
                ),
            )?;
            let ks = [&k1, &k2, &k3, &k4, &k5, &k6];
            let terms: Vec<(f64, &Tensor)> = B.iter().zip(ks).map(|(b, k)| (hcur * b, k)).collect();
            let ynew = axpy(y, &terms);
            let (err, k7) = if finite(&ynew) {
                let k7 = clock.eval(tau + C[6] * hcur, &ynew)?;
                let mut e = Tensor::zeros(y.dim());
                for (c, k) in E.iter().zip(ks.into_iter().chain(std::iter::once(&k7))) {
                    if *c != 0.0 {
                        e.scaled_add(hcur * c, k);
                    }
                }
                (scaled_norm(&e, y, &ynew, rtol, atol), Some(k7))
            } else {
                (f64::INFINITY, None)
            };
            if err <= 1.0 {
                tau = if ends { hi } else { tau + hcur };
                *y = ynew;
                k1 = k7.unwrap();
                traj.stats.steps += 1;
                let last = ends && si + 1 == nseg;
                let t = if last { t1 } else { clock.time(tau) };
                traj.push(t, y, cfg.save_trajectory || last);
                let mut factor = if err == 0.0 {
                    MAX_FACTOR
                } else {
                    (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
                };
                if last_rejected {
                    factor = factor.min(1.0);
                }
                last_rejected = false;
                // Keep the unclipped proposal for the next segment.
                h = Some(hcur * factor);
                hcur *= factor;
            } else {
                traj.stats.rejected += 1;
                last_rejected = true;
                let factor = if err.is_finite() {
                    (SAFETY * err.powf(-0.2)).max(MIN_FACTOR)
                } else {
                    MIN_FACTOR
                };
                hcur *= factor;
                if hcur < hmin {
                    return Err(Error::Stiff {
                        t: clock.time(tau),
                        dt: hcur,
                    });
                }
            }
            if traj.stats.steps + traj.stats.rejected > cfg.max_steps {
                return Err(Error::Stiff {
                    t: clock.time(tau),
                    dt: hcur,
                });
            }
        }
    }
    Ok(())
}
