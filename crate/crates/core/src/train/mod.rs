//! Training loops.
//!
//! Maximum likelihood minimizes the single-path bound
//! `−log p_T(x) ≤ −E_ω log p_T(x | ω)` with one fresh path per minibatch.
//! Targeted diffusions minimize `E[log p_T(Z_T) − log p(Z_T)]` over prior
//! draws pushed forward, with `log p_T` a log-mean-exp over several paths.
//! The single-path density would reward shrinking the noise, since
//! `E log p_T(Z_T | ω)` exceeds `E log p_T(Z_T)` by the information `Z_T`
//! carries about `ω`. Gradients come from [`adjoint_grads`] or
//! [`discretize_grads`] and feed an [`Adagrad`] step.

mod adagrad;
mod grads;

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::density::{logdensity_mc, prior_sample, DensityConfig};
use crate::dynamics::{FieldConfig, Noise, ProbeKind, SdeModel, TraceProbe};
use crate::error::{Error, Result};
use crate::paths::{BrownianApprox, PathKind};
use crate::rng;
use crate::solve::SolveConfig;
use crate::targets::LogDensity;

pub use adagrad::Adagrad;
pub use grads::{
    adjoint_grads, discretize_grads, loss_and_grad, marginal_kl_grads, marginal_loss_and_grad, Batch, GradMode, GradSettings, Gradient, KlTarget, Marginal,
    Nll, Terminal,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Paths per minibatch. Above one, rows take the paths in turn.
    pub paths_per_batch: usize,
    pub path_kind: PathKind,
    /// KL terms, or PL intervals.
    pub path_order: usize,
    pub horizon: f64,
    pub grad_mode: GradMode,
    pub solve: SolveConfig,
    pub field: FieldConfig,
    pub probe: ProbeKind,
    pub probe_count: usize,
    /// Extra paths per row in the log-mean-exp estimate of `log p_T(Z_T)` for
    /// targeted training. Zero uses the single-path conditional density.
    pub kl_paths: usize,
    /// Include each sample's own path in that estimate.
    pub kl_own_path: bool,
    /// Weight of `‖w‖₁` over network weights (biases excluded).
    pub l1: f64,
    /// Row blocks solved in parallel.
    pub shards: usize,
    pub memory_limit: usize,
    pub seed: u64,
    /// Wall time in the metrics makes them differ between runs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            iterations: 1000,
            batch_size: 1000,
            paths_per_batch: 1,
            path_kind: PathKind::KarhunenLoeve,
            path_order: 6,
            horizon: 1.0,
            grad_mode: GradMode::Adjoint,
            solve: SolveConfig::adaptive(1e-6, 1e-6),
            field: FieldConfig::default(),
            probe: ProbeKind::Rademacher,
            probe_count: 1,
            kl_paths: 4,
            kl_own_path: true,
            l1: 0.0,
            shards: 1,
            memory_limit: 2 << 30,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.paths_per_batch == 0 || self.path_order == 0 || self.probe_count == 0 {
            return bad("batch size, paths per batch, path order and probe count must be positive".into());
        }
        if self.shards == 0 {
            return bad("shards must be positive".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.l1 >= 0.0) {
            return bad(format!("l1 weight must be >= 0, got {}", self.l1));
        }
        self.solve.validate()
    }

    fn settings(&self) -> GradSettings {
        GradSettings {
            mode: self.grad_mode,
            solve: self.solve,
            field: self.field,
            memory_limit: self.memory_limit,
        }
    }

    fn sample_path<R: rand::Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<BrownianApprox> {
        match self.path_kind {
            PathKind::KarhunenLoeve => BrownianApprox::sample_kl(m, self.path_order, self.horizon, rng),
            PathKind::PiecewiseLinear => BrownianApprox::sample_pl_uniform(m, self.path_order, self.horizon, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    /// Objective including the L1 term, before the update.
    pub loss: f64,
    pub grad_norm: f64,
    /// ‖w‖₁ over network weights (biases excluded) after the update.
    pub weight_l1: f64,
    /// Zero unless wall time is recorded.
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SdeModel,
    pub history: Vec<IterMetrics>,
    /// Why training stopped early, if it did. `model` is then the last
    /// parameters that gave a finite loss.
    pub aborted: Option<String>,
}

/// `λ₁ ‖w‖₁` and its subgradient `λ₁ sign(w)` (zero at zero).
pub fn l1_penalty(params: &Array1<f64>, mask: &[bool], lambda: f64) -> (f64, Array1<f64>) {
    let mut value = 0.0;
    let mut grad = Array1::zeros(params.len());
    if lambda == 0.0 {
        return (0.0, grad);
    }
    for ((w, m), g) in params.iter().zip(mask).zip(grad.iter_mut()) {
        if *m {
            value += w.abs();
            *g = if *w > 0.0 {
                lambda
            } else if *w < 0.0 {
                -lambda
            } else {
                0.0
            };
        }
    }
    (lambda * value, grad)
}

/// Paths and probes for one iteration, drawn from that iteration's stream.
struct Draws {
    paths: Vec<BrownianApprox>,
    probe: Option<TraceProbe>,
    /// `kl_paths` per row for the marginal estimate, and their probes.
    extra: Vec<BrownianApprox>,
    extra_probe: Option<TraceProbe>,
}

impl Draws {
    fn new<R: rand::Rng + ?Sized>(cfg: &TrainConfig, model: &SdeModel, rows: usize, extra: usize, rng: &mut R) -> Result<Self> {
        let unique = (0..cfg.paths_per_batch.min(rows))
            .map(|_| cfg.sample_path(model.noise_dim(), rng))
            .collect::<Result<Vec<_>>>()?;
        let paths = if unique.len() == 1 {
            unique
        } else {
            (0..rows).map(|i| unique[i % unique.len()].clone()).collect()
        };
        let d = model.dim();
        let traced = d > cfg.field.exact_max_dim;
        let probe = match traced {
            true => Some(TraceProbe::sample(cfg.probe, cfg.probe_count, rows, d, rng)?),
            false => None,
        };
        let extra = (0..rows * extra)
            .map(|_| cfg.sample_path(model.noise_dim(), rng))
            .collect::<Result<Vec<_>>>()?;
        let extra_probe = match traced && !extra.is_empty() {
            true => Some(TraceProbe::sample(cfg.probe, cfg.probe_count, extra.len(), d, rng)?),
            false => None,
        };
        Ok(Self {
            paths,
            probe,
            extra,
            extra_probe,
        })
    }

    fn batch<'a>(&'a self, start: &'a Tensor) -> Batch<'a> {
        Batch {
            start,
            noise: Noise::from_slice(&self.paths),
            probe: self.probe.as_ref(),
        }
    }
}

/// Batch-mean loss and gradient at the current parameters.
type Objective<'a> = dyn Fn(&SdeModel, Batch<'_>, &Draws) -> Result<Gradient> + 'a;

fn run<F>(
    model: &SdeModel,
    cfg: &TrainConfig,
    objective: &Objective<'_>,
    extra: usize,
    mut batch_start: F,
    mut on_iter: impl FnMut(&IterMetrics),
) -> Result<TrainOutcome>
where
    F: FnMut(&mut rng::Rng) -> Tensor,
{
    cfg.validate()?;
    let mask = model.weight_mask();
    let mut model = model.clone();
    let mut opt = Adagrad::new(cfg.lr, model.num_params());
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let clock = Instant::now();
        let mut r = rng::stream(cfg.seed, iter as u64);
        let start = batch_start(&mut r);
        let draws = Draws::new(cfg, &model, start.nrows(), extra, &mut r)?;
        let g = match objective(&model, draws.batch(&start), &draws) {
            Ok(g) => g,
            Err(e) if e.is_numerical() => {
                return Ok(TrainOutcome {
                    model,
                    history,
                    aborted: Some(format!("iteration {iter}: {e}")),
                })
            }
            Err(e) => return Err(e),
        };
        let (pen, pen_grad) = l1_penalty(model.params(), &mask, cfg.l1);
        let grad = g.grad + pen_grad;
        let loss_value = g.loss + pen;
        let grad_norm = grad.dot(&grad).sqrt();
        if !loss_value.is_finite() || !grad_norm.is_finite() {
            return Ok(TrainOutcome {
                model,
                history,
                aborted: Some(format!("iteration {iter}: non-finite loss {loss_value} or gradient norm {grad_norm}")),
            });
        }
        let mut params = model.params().clone();
        opt.step(&mut params, &grad)?;
        let weight_l1 = params.iter().zip(&mask).filter(|(_, m)| **m).map(|(w, _)| w.abs()).sum();
        model.set_params(params)?;
        let m = IterMetrics {
            iter,
            loss: loss_value,
            grad_norm,
            weight_l1,
            wall_ms: if cfg.record_wall_time {
                clock.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        on_iter(&m);
        history.push(m);
    }
    Ok(TrainOutcome {
        model,
        history,
        aborted: None,
    })
}

/// Maximum-likelihood training on the rows of `data`.
pub fn train_mle(data: &Array2<f64>, model: &SdeModel, cfg: &TrainConfig, on_iter: impl FnMut(&IterMetrics)) -> Result<TrainOutcome> {
    if data.nrows() == 0 || data.ncols() != model.dim() {
        return Err(Error::InvalidArgument(format!("data is {:?}, model dimension is {}", data.dim(), model.dim())));
    }
    let pick = |r: &mut rng::Rng| {
        if cfg.batch_size >= data.nrows() {
            data.clone()
        } else {
            data.select(Axis(0), &index::sample(r, data.nrows(), cfg.batch_size).into_vec())
        }
    };
    let settings = cfg.settings();
    let nll = |m: &SdeModel, b: Batch<'_>, _: &Draws| loss_and_grad(m, b, &Nll, &settings, cfg.shards);
    run(model, cfg, &nll, 0, pick, on_iter)
}

/// Variational training of `model` towards `target`.
pub fn train_kl_target(target: &dyn LogDensity, model: &SdeModel, cfg: &TrainConfig, on_iter: impl FnMut(&IterMetrics)) -> Result<TrainOutcome> {
    if target.dim() != model.dim() {
        return Err(Error::InvalidArgument(format!(
            "target is {}-dimensional, model is {}",
            target.dim(),
            model.dim()
        )));
    }
    let d = model.dim();
    let draw = |r: &mut rng::Rng| prior_sample(cfg.batch_size, d, r);
    let settings = cfg.settings();
    let k = cfg.kl_paths;
    let kl = |m: &SdeModel, b: Batch<'_>, d: &Draws| match k {
        0 => loss_and_grad(m, b, &KlTarget(target), &settings, cfg.shards),
        _ => {
            let marginal = Marginal {
                target,
                paths: &d.extra,
                k,
                own_path: cfg.kl_own_path,
                probe: d.extra_probe.as_ref(),
            };
            marginal_loss_and_grad(m, b, marginal, &settings, cfg.shards)
        }
    };
    run(model, cfg, &kl, k, draw, on_iter)
}

/// Mean of `−log p_T(x)` over the rows of `data`, estimated with `paths`.
pub fn mean_nll(model: &SdeModel, data: &Array2<f64>, paths: &[BrownianApprox], cfg: &DensityConfig) -> Result<f64> {
    let est = logdensity_mc(model, paths, data, cfg)?;
    Ok(-est.aggregate.mean().unwrap())
}
