use ndarray::{Array2, ArrayView1};
use serde::Serialize;

use crate::error::{invalid, Result};

/// Discrete α-Hölder norm estimate of a sampled path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HolderEstimate {
    pub alpha: f64,
    pub value: f64,
    /// Number of sample times used.
    pub resolution: usize,
}

fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `sup_t ‖X_t‖ + max_{s≠t} ‖X_t − X_s‖ / |t − s|^α` over all sample pairs.
///
/// `values` holds one row per entry of `times`.
pub fn holder_norm(times: &[f64], values: &Array2<f64>, alpha: f64) -> Result<HolderEstimate> {
    if times.len() < 2 {
        return Err(invalid("Hölder norm needs at least two samples"));
    }
    if values.nrows() != times.len() {
        return Err(invalid(format!(
            "{} times but {} sample rows",
            times.len(),
            values.nrows()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let zero = ndarray::Array1::zeros(values.ncols());
    let sup = values
        .rows()
        .into_iter()
        .map(|r| dist(r, zero.view()))
        .fold(0.0, f64::max);
    let mut ratio: f64 = 0.0;
    for i in 0..times.len() {
        for j in i + 1..times.len() {
            let dt = (times[j] - times[i]).abs();
            if dt > 0.0 {
                ratio = ratio.max(dist(values.row(i), values.row(j)) / dt.powf(alpha));
            }
        }
    }
    Ok(HolderEstimate {
        alpha,
        value: sup + ratio,
        resolution: times.len(),
    })
}
