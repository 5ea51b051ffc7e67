use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snflow::dynamics::{Diffusion, Drift, DriftConvention, ProbeKind, SdeModel};
use snflow::nets::{Activation, MlpSpec};
use snflow::paths::PathKind;
use snflow::solve::SolveConfig;
use snflow::targets::Target1d;
use snflow::train::{GradMode, TrainConfig};
use snflow::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Banana,
    Star,
    Cauchy,
    /// Maximum likelihood on the CSV dataset named by `data`.
    Custom,
}

impl Experiment {
    pub fn is_targeted(self) -> bool {
        self == Experiment::Cauchy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DiffusionKind {
    None,
    Offdiag,
    Diagonal,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    /// State dimension for `custom` runs; other experiments fix it.
    pub dim: usize,
    /// Drift network preset, or `zero` for no drift. Ignored by `cauchy`,
    /// whose drift is built from the target and `σ`.
    pub drift: String,
    pub diffusion: DiffusionKind,
    /// Diffusion network preset; `auto` picks cauchy-sigma-4x32 for `cauchy`
    /// and offdiag-2x64 otherwise.
    pub diffusion_net: String,
    /// Noise scale of the off-diagonal diffusion.
    pub lambda: f64,
    pub activation: Activation,
    /// Exponentiate the diagonal diffusion network.
    pub positive: bool,
    pub convention: DriftConvention,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            dim: 2,
            drift: "drift-4x64".into(),
            diffusion: DiffusionKind::Offdiag,
            diffusion_net: "auto".into(),
            lambda: 1.0,
            activation: Activation::Tanh,
            positive: true,
            convention: DriftConvention::ZeroFlux,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub paths_per_batch: usize,
    pub grad_mode: GradMode,
    pub probe: ProbeKind,
    pub probe_count: usize,
    pub kl_paths: usize,
    pub kl_own_path: bool,
    /// L1 weight on network weights. Negative means the experiment default:
    /// 1e-4 for `cauchy`, 0 otherwise.
    pub l1: f64,
    pub shards: usize,
    pub memory_limit: usize,
    pub record_wall_time: bool,
    /// Seeds paths, probes and minibatches. Negative means `seed`.
    pub path_seed: i64,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            iterations: t.iterations,
            batch_size: t.batch_size,
            paths_per_batch: t.paths_per_batch,
            grad_mode: t.grad_mode,
            probe: t.probe,
            probe_count: t.probe_count,
            kl_paths: t.kl_paths,
            kl_own_path: t.kl_own_path,
            l1: -1.0,
            shards: t.shards,
            memory_limit: t.memory_limit,
            record_wall_time: t.record_wall_time,
            path_seed: -1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathBlock {
    pub kind: PathKind,
    /// KL terms, or PL intervals.
    pub order: usize,
    pub horizon: f64,
}

impl Default for PathBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            kind: t.path_kind,
            order: t.path_order,
            horizon: t.horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset CSV for `custom` runs.
    pub data: Option<PathBuf>,
    /// Training samples drawn for `banana` and `star`.
    pub samples: usize,
    pub model: ModelBlock,
    pub train: TrainBlock,
    pub solve: SolveConfig,
    pub path: PathBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Banana,
            seed: 0,
            out: PathBuf::from("runs/out"),
            data: None,
            samples: 10_000,
            model: ModelBlock::default(),
            train: TrainBlock::default(),
            solve: TrainConfig::default().solve,
            path: PathBlock::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn l1(&self) -> f64 {
        match self.train.l1 {
            l if l >= 0.0 => l,
            _ if self.experiment.is_targeted() => 1e-4,
            _ => 0.0,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            lr: t.lr,
            iterations: t.iterations,
            batch_size: t.batch_size,
            paths_per_batch: t.paths_per_batch,
            path_kind: self.path.kind,
            path_order: self.path.order,
            horizon: self.path.horizon,
            grad_mode: t.grad_mode,
            solve: self.solve,
            probe: t.probe,
            probe_count: t.probe_count,
            kl_paths: t.kl_paths,
            kl_own_path: t.kl_own_path,
            l1: self.l1(),
            shards: t.shards,
            memory_limit: t.memory_limit,
            seed: if t.path_seed < 0 { self.seed } else { t.path_seed as u64 },
            record_wall_time: t.record_wall_time,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn diffusion_net(&self) -> &str {
        match (self.model.diffusion_net.as_str(), self.experiment) {
            ("auto", Experiment::Cauchy) => "cauchy-sigma-4x32",
            ("auto", _) => "offdiag-2x64",
            (name, _) => name,
        }
    }

    /// Freshly initialized model for this experiment, seeded by `seed`.
    pub fn build_model(&self, dim: usize) -> Result<SdeModel> {
        let m = &self.model;
        let act = m.activation;
        let net = self.diffusion_net();
        if self.experiment == Experiment::Cauchy {
            let spec = MlpSpec::preset(net, 1, act)?;
            let drift = Drift::Ergodic {
                target: Target1d::Cauchy,
                convention: m.convention,
            };
            let diffusion = Diffusion::DiagonalNet {
                spec,
                positive: m.positive,
            };
            return SdeModel::init(1, 1, drift, diffusion, self.seed);
        }
        let drift = match m.drift.as_str() {
            "zero" => Drift::Zero,
            name => Drift::Net {
                spec: MlpSpec::preset(name, dim, act)?,
            },
        };
        let diffusion = match m.diffusion {
            DiffusionKind::None => Diffusion::zero(dim, dim),
            DiffusionKind::Offdiag => Diffusion::OffDiag {
                lambda: m.lambda,
                spec: MlpSpec::preset(net, dim, act)?,
            },
            DiffusionKind::Diagonal => Diffusion::DiagonalNet {
                spec: with_output(MlpSpec::preset(net, dim, act)?, dim)?,
                positive: m.positive,
            },
            DiffusionKind::Full => Diffusion::Full {
                spec: with_output(MlpSpec::preset(net, dim, act)?, dim * dim)?,
            },
        };
        SdeModel::init(dim, dim, drift, diffusion, self.seed)
    }

    /// Settings that differ from the experiment's needs are rejected here
    /// rather than halfway through a run.
    pub fn validate(&self) -> Result<()> {
        if self.experiment == Experiment::Custom && self.data.is_none() {
            return Err(config_err("custom experiments need `data`"));
        }
        if self.samples == 0 {
            return Err(config_err("samples must be positive"));
        }
        self.train_config().map(|_| ())
    }
}

/// Replaces the last layer width of a preset.
fn with_output(mut spec: MlpSpec, out: usize) -> Result<MlpSpec> {
    *spec.widths.last_mut().unwrap() = out;
    spec.validate()?;
    Ok(spec)
}
