use ndarray::Array1;

use crate::error::{invalid, Result};

/// `acc += g²; θ −= lr · g / √(acc + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    accum: Array1<f64>,
}

impl Adagrad {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            eps: 1e-8,
            accum: Array1::zeros(n),
        }
    }

    pub fn accumulator(&self) -> &Array1<f64> {
        &self.accum
    }

    pub fn step(&mut self, params: &mut Array1<f64>, grad: &Array1<f64>) -> Result<()> {
        if params.len() != self.accum.len() || grad.len() != self.accum.len() {
            return Err(invalid(format!(
                "optimizer holds {} parameters, got {} parameters and {} gradients",
                self.accum.len(),
                params.len(),
                grad.len()
            )));
        }
        for ((p, a), g) in params.iter_mut().zip(self.accum.iter_mut()).zip(grad) {
            *a += g * g;
            *p -= self.lr * g / (*a + self.eps).sqrt();
        }
        Ok(())
    }
}
