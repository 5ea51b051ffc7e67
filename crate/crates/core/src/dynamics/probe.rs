use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[default]
    Rademacher,
    Gaussian,
}

/// Probe vectors for Hutchinson's estimator `tr(J) ≈ (1/n) Σ εᵀ J ε`.
///
/// Each of the `count` probes holds one vector per batch row. Probes are drawn
/// once and kept fixed for a whole trajectory, so the augmented field stays
/// an honest ODE.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceProbe {
    kind: ProbeKind,
    eps: Vec<Tensor>,
}

impl TraceProbe {
    pub fn sample<R: Rng + ?Sized>(
        kind: ProbeKind,
        count: usize,
        rows: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 || rows == 0 || d == 0 {
            return Err(invalid("probe count, rows and dimension must be positive"));
        }
        let eps = (0..count)
            .map(|_| {
                Tensor::from_shape_simple_fn((rows, d), || match kind {
                    ProbeKind::Rademacher => {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    ProbeKind::Gaussian => rng.sample(StandardNormal),
                })
            })
            .collect();
        Ok(Self { kind, eps })
    }

    pub fn kind(&self) -> ProbeKind {
        self.kind
    }

    pub fn count(&self) -> usize {
        self.eps.len()
    }

    pub fn rows(&self) -> usize {
        self.eps[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.eps[0].ncols()
    }

    pub fn vectors(&self) -> &[Tensor] {
        &self.eps
    }

    /// Probes for rows `start..start + len` only.
    pub fn rows_slice(&self, start: usize, len: usize) -> Self {
        Self {
            kind: self.kind,
            eps: self
                .eps
                .iter()
                .map(|e| e.slice(ndarray::s![start..start + len, ..]).to_owned())
                .collect(),
        }
    }
}
