//! Multilayer perceptrons with flat parameter vectors.
//!
//! Parameters of layer `l` are stored as the weight matrix (`out × in`,
//! row-major) followed by the bias (`out`), layer after layer. Optimizers and
//! the adjoint solver only ever see the flat vector.

mod checkpoint;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::rng::seeded;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, NamedParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            _ => Err(invalid(format!("unknown activation `{s}` (tanh | softplus)"))),
        }
    }
}

/// Layer widths `(input, hidden…, output)`; the output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    /// One entry per hidden layer.
    pub activations: Vec<Activation>,
    /// If set, `t` is appended to the input and counts toward `widths[0]`.
    pub time_input: bool,
}

pub const PRESETS: [&str; 3] = ["drift-4x64", "offdiag-2x64", "cauchy-sigma-4x32"];

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, time_input: bool) -> Result<Self> {
        let spec = Self {
            activations: vec![activation; widths.len().saturating_sub(2)],
            widths,
            time_input,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(invalid("an MLP needs at least one hidden layer"));
        }
        if self.widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if self.activations.len() != self.widths.len() - 2 {
            return Err(invalid("need one activation per hidden layer"));
        }
        if self.time_input && self.widths[0] < 2 {
            return Err(invalid("time input needs an input width of at least 2"));
        }
        Ok(())
    }

    /// Architectures used in the experiments. `d` is the state dimension.
    pub fn preset(name: &str, d: usize, activation: Activation) -> Result<Self> {
        let widths = match name {
            "drift-4x64" => vec![d, 64, 64, 64, d],
            "offdiag-2x64" => vec![d, 64, 2],
            "cauchy-sigma-4x32" => vec![1, 32, 32, 32, 1],
            _ => {
                return Err(invalid(format!(
                    "unknown preset `{name}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Self::new(widths, activation, false)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0] - usize::from(self.time_input)
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Total parameter count `Σ (fan_in + 1) · fan_out`.
    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// `(weight_start, bias_start)` for each layer.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let o = (at, at + w[0] * w[1]);
                at += (w[0] + 1) * w[1];
                o
            })
            .collect()
    }

    /// Glorot-uniform weights, zero biases, final layer shrunk by 100 so the
    /// network starts close to the zero function.
    pub fn init(&self, seed: u64) -> Array1<f64> {
        let mut rng = seeded(seed);
        let mut params = Array1::zeros(self.num_params());
        let last = self.layers() - 1;
        for (l, ((w0, _), win)) in self.offsets().into_iter().zip(self.widths.windows(2)).enumerate() {
            let (fan_in, fan_out) = (win[0], win[1]);
            let mut limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if l == last {
                limit *= 1e-2;
            }
            for p in params.slice_mut(ndarray::s![w0..w0 + fan_in * fan_out]) {
                *p = rng.random_range(-limit..=limit);
            }
        }
        params
    }

    /// Puts the parameters on `tape`, as differentiable inputs if `trainable`.
    pub fn load<'t>(&self, tape: &'t Tape, params: &[f64], trainable: bool) -> Result<MlpVars<'t>> {
        if params.len() != self.num_params() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let put = |t: Tensor| if trainable { tape.var(t) } else { tape.constant(t) };
        let layers = self
            .offsets()
            .into_iter()
            .zip(self.widths.windows(2))
            .map(|((w0, b0), win)| {
                let (fan_in, fan_out) = (win[0], win[1]);
                let w = Tensor::from_shape_vec((fan_out, fan_in), params[w0..b0].to_vec()).unwrap();
                let b = Tensor::from_shape_vec((1, fan_out), params[b0..b0 + fan_out].to_vec()).unwrap();
                (put(w), put(b))
            })
            .collect();
        Ok(MlpVars {
            spec: self.clone(),
            layers,
        })
    }
}

/// An MLP whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars<'t> {
    spec: MlpSpec,
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> MlpVars<'t> {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Evaluates the network on a batch `x` (`r × input_width`).
    ///
    /// `t` is required exactly when the spec takes time as an input.
    pub fn forward(&self, x: Var<'t>, t: Option<f64>) -> Result<Var<'t>> {
        if x.cols() != self.spec.input_width() {
            return Err(invalid(format!(
                "network expects {} inputs, got {}",
                self.spec.input_width(),
                x.cols()
            )));
        }
        let tape = x.tape();
        let mut h = match (self.spec.time_input, t) {
            (true, Some(t)) => tape.concat_cols(&[x, tape.constant(Tensor::from_elem((x.rows(), 1), t))]),
            (false, None) => x,
            (true, None) => return Err(invalid("network takes time as input but none was given")),
            (false, Some(_)) => return Err(invalid("network is time-homogeneous; drop the time argument")),
        };
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(h, w, b);
            if l < last {
                h = match self.spec.activations[l] {
                    Activation::Tanh => h.tanh(),
                    Activation::Softplus => h.softplus(),
                };
            }
        }
        Ok(h)
    }

    /// Parameter nodes in flat-vector order (`W₁, b₁, W₂, b₂, …`).
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Packs per-node gradients (in [`MlpVars::vars`] order) into a flat vector.
    pub fn flatten(&self, grads: &[Tensor]) -> Array1<f64> {
        grads.iter().flat_map(|g| g.iter().copied()).collect()
    }
}

/// Indices of weight (not bias) entries in the flat vector of `spec`.
pub fn weight_mask(spec: &MlpSpec) -> Vec<bool> {
    let mut mask = vec![false; spec.num_params()];
    for ((w0, b0), _) in spec.offsets().into_iter().zip(spec.widths.windows(2)) {
        mask[w0..b0].iter_mut().for_each(|m| *m = true);
    }
    mask
}
