mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use snflow::density::Estimator;
use snflow::paths::PathKind;
use snflow::train::GradMode;

use config::{Experiment, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "snflow", version, about = "Train, evaluate and sample stochastic normalizing flows")]
struct Cli {
    /// Worker threads for batch and path parallelism [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to data, or to a target density for `cauchy`
    Train(TrainArgs),
    /// Log-density of a checkpoint on a grid
    Density(DensityArgs),
    /// Draw samples by forward solves, or run an Euler-Maruyama chain
    Sample(SampleArgs),
    /// Learn the diffusion coefficient of a Cauchy-ergodic SDE
    McmcOpt(McmcArgs),
    /// Dump a Brownian path approximation
    Path(PathArgs),
}

/// Flags shared by the training commands; each overrides the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration (keys listed in `snflow --help`)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training iterations
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size [default: 1000]
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    paths_per_batch: Option<usize>,
    #[arg(long, value_enum)]
    grad_mode: Option<GradModeArg>,
    /// Fixed-step RK4 with this many steps instead of the adaptive solver
    #[arg(long)]
    rk4: Option<usize>,
    /// Seed for paths, probes and minibatches [default: --seed]
    #[arg(long)]
    path_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long, value_enum)]
    experiment: Option<Experiment>,
    /// Noise scale of the off-diagonal diffusion (0 gives a plain CNF)
    #[arg(long)]
    lambda: Option<f64>,
    /// L1 weight on network weights [default: 1e-4 for cauchy, else 0]
    #[arg(long)]
    l1: Option<f64>,
    /// Dataset CSV for custom experiments
    #[arg(long)]
    data: Option<PathBuf>,
    /// Samples drawn for banana and star
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct McmcArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long, default_value_t = 1e-4)]
    l1: f64,
    /// Extra paths per sample in the log-mean-exp density estimate
    #[arg(long)]
    kl_paths: Option<usize>,
    /// Count each sample's own path in that estimate
    #[arg(long)]
    kl_own_path: Option<bool>,
    /// Points of the σ table over [-x-max, x-max]
    #[arg(long, default_value_t = 101)]
    grid_points: usize,
    #[arg(long, default_value_t = 5.0)]
    x_max: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GradModeArg {
    Adjoint,
    Discretize,
}

impl From<GradModeArg> for GradMode {
    fn from(g: GradModeArg) -> Self {
        match g {
            GradModeArg::Adjoint => GradMode::Adjoint,
            GradModeArg::Discretize => GradMode::Discretize,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PathKindArg {
    Kl,
    Pl,
}

impl From<PathKindArg> for PathKind {
    fn from(k: PathKindArg) -> Self {
        match k {
            PathKindArg::Kl => PathKind::KarhunenLoeve,
            PathKindArg::Pl => PathKind::PiecewiseLinear,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EstimatorArg {
    /// log of the mean density over paths
    Lme,
    /// mean of the log-densities (a lower bound)
    Mean,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Lme => Estimator::LogMeanExp,
            EstimatorArg::Mean => Estimator::MeanBound,
        }
    }
}

#[derive(Args, Debug)]
struct DensityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Paths in the Monte Carlo estimate
    #[arg(long, default_value_t = 64)]
    paths: usize,
    /// Path kind [default: as trained]
    #[arg(long, value_enum)]
    kind: Option<PathKindArg>,
    /// KL terms or PL intervals [default: as trained]
    #[arg(long)]
    order: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    nx: usize,
    #[arg(long, default_value_t = 100)]
    ny: usize,
    #[arg(long, default_value = "-4,4", value_parser = parse_range, allow_hyphen_values = true)]
    x_range: (f64, f64),
    #[arg(long, default_value = "-4,4", value_parser = parse_range, allow_hyphen_values = true)]
    y_range: (f64, f64),
    #[arg(long, value_enum, default_value = "lme")]
    estimator: EstimatorArg,
    /// Solver tolerance (relative and absolute)
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Also write density.pgm, a grayscale image of the density
    #[arg(long)]
    render: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SampleMode {
    /// Independent forward solves from the prior
    Generate,
    /// One Euler-Maruyama trajectory
    Chain,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "generate")]
    mode: SampleMode,
    /// Samples, or chain steps
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    /// Chain step size
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    /// Chain steps discarded before recording
    #[arg(long, default_value_t = 0)]
    burn_in: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Solver tolerance for generate mode
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Histogram bins for one-dimensional models (0 to skip)
    #[arg(long, default_value_t = 100)]
    bins: usize,
    #[arg(long, default_value = "-10,10", value_parser = parse_range, allow_hyphen_values = true)]
    hist_range: (f64, f64),
    /// Also write samples.svg for two-dimensional models
    #[arg(long)]
    render: bool,
}

#[derive(Args, Debug)]
struct PathArgs {
    #[arg(long, value_enum, default_value = "kl")]
    kind: PathKindArg,
    /// KL terms or PL intervals
    #[arg(long, default_value_t = 6)]
    order: usize,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation times, evenly spaced over [0, horizon]
    #[arg(long, default_value_t = 1001)]
    points: usize,
    /// Output CSV file
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if !(lo < hi) {
        return Err("LO must be below HI".into());
    }
    Ok((lo, hi))
}

fn config_reference() -> String {
    let mut s = String::from("Config file keys and defaults (TOML):\n\n");
    s.push_str("# data = \"samples.csv\"  (custom experiments only)\n");
    s.push_str("# train.l1 < 0 means 1e-4 for cauchy and 0 otherwise; train.path_seed < 0 means seed\n");
    s.push_str("# solve.method may also be { kind = \"rk4\", steps = N }\n");
    s.push_str(&RunConfig::default().to_toml());
    s
}

impl Overrides {
    fn resolve(&self, experiment: Option<Experiment>) -> snflow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(e) = experiment {
            cfg.experiment = e;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.iters {
            cfg.train.iterations = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.paths_per_batch {
            cfg.train.paths_per_batch = v;
        }
        if let Some(v) = self.grad_mode {
            cfg.train.grad_mode = v.into();
        }
        if let Some(v) = self.rk4 {
            cfg.solve = snflow::solve::SolveConfig::rk4(v);
        }
        if let Some(v) = self.path_seed {
            cfg.train.path_seed = i64::try_from(v).map_err(|_| snflow::Error::Config("path seed too large".into()))?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> snflow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| snflow::Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => {
            let mut cfg = a.common.resolve(a.experiment)?;
            if let Some(v) = a.lambda {
                cfg.model.lambda = v;
            }
            if let Some(v) = a.l1 {
                cfg.train.l1 = v;
            }
            if let Some(v) = a.data {
                cfg.data = Some(v);
            }
            if let Some(v) = a.samples {
                cfg.samples = v;
            }
            commands::train(&cfg, None)
        }
        Command::McmcOpt(a) => {
            let mut cfg = a.common.resolve(Some(Experiment::Cauchy))?;
            cfg.train.l1 = a.l1;
            if let Some(v) = a.kl_paths {
                cfg.train.kl_paths = v;
            }
            if let Some(v) = a.kl_own_path {
                cfg.train.kl_own_path = v;
            }
            let table = commands::SigmaTable {
                points: a.grid_points,
                x_max: a.x_max,
            };
            commands::train(&cfg, Some(table))
        }
        Command::Density(a) => commands::density(&commands::DensityJob {
            checkpoint: a.checkpoint,
            out: a.out,
            paths: a.paths,
            kind: a.kind.map(Into::into),
            order: a.order,
            seed: a.seed,
            lattice: snflow::density::Lattice {
                x: a.x_range,
                y: a.y_range,
                nx: a.nx,
                ny: a.ny,
            },
            estimator: a.estimator.into(),
            tol: a.tol,
            render: a.render,
        }),
        Command::Sample(a) => commands::sample(&commands::SampleJob {
            checkpoint: a.checkpoint,
            out: a.out,
            chain: matches!(a.mode, SampleMode::Chain),
            count: a.count,
            dt: a.dt,
            burn_in: a.burn_in,
            seed: a.seed,
            tol: a.tol,
            bins: a.bins,
            hist_range: a.hist_range,
            render: a.render,
        }),
        Command::Path(a) => commands::path(a.kind.into(), a.order, a.dim, a.horizon, a.seed, a.points, &a.out),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(config_reference()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
