use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::json;
use snflow::density::{density_grid, elbo_bound, logdensity_mc, sample_forward, DensityConfig, Estimator, Lattice};
use snflow::dynamics::{Drift, Noise, SdeModel};
use snflow::nets::{read_checkpoint, write_checkpoint};
use snflow::paths::{BrownianApprox, PathKind};
use snflow::rng;
use snflow::solve::{euler_maruyama_chain, SolveConfig};
use snflow::targets::{read_dataset, write_dataset, Target2d};
use snflow::train::{train_kl_target, train_mle, IterMetrics, TrainOutcome};
use snflow::{Error, Result};

use crate::config::{Experiment, RunConfig};
use crate::render;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

/// How the checkpoint's paths were drawn, stored next to the model.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct PathMeta {
    kind: PathKind,
    order: usize,
    horizon: f64,
}

fn save_model(model: &SdeModel, path: PathMeta, file: &Path) -> Result<()> {
    let mut ckpt = model.to_checkpoint();
    ckpt.meta["path"] = serde_json::to_value(path)?;
    write_checkpoint(BufWriter::new(File::create(file)?), &ckpt)
}

fn load_model(file: &Path) -> Result<(SdeModel, PathMeta)> {
    let ckpt = read_checkpoint(BufReader::new(File::open(file)?))?;
    let model = SdeModel::from_checkpoint(&ckpt)?;
    let path = match ckpt.meta.get("path") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => PathMeta {
            kind: PathKind::KarhunenLoeve,
            order: 6,
            horizon: 1.0,
        },
    };
    Ok((model, path))
}

fn sample_paths(kind: PathKind, m: usize, order: usize, horizon: f64, count: usize, seed: u64) -> Result<Vec<BrownianApprox>> {
    let mut r = rng::seeded(seed);
    (0..count)
        .map(|_| match kind {
            PathKind::KarhunenLoeve => BrownianApprox::sample_kl(m, order, horizon, &mut r),
            PathKind::PiecewiseLinear => BrownianApprox::sample_pl_uniform(m, order, horizon, &mut r),
        })
        .collect()
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// σ(x) table written by `mcmc-opt`.
pub struct SigmaTable {
    pub points: usize,
    pub x_max: f64,
}

fn write_sigma_table(model: &SdeModel, t: &SigmaTable, file: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(file)?);
    writeln!(w, "x,sigma,reference")?;
    for x in grid(-t.x_max, t.x_max, t.points) {
        let sigma = model.diffusion_matrix(&[x], 0.0)?[[0, 0]];
        writeln!(w, "{x},{sigma},{}", (1.0 + x * x).sqrt())?;
    }
    w.flush()?;
    Ok(())
}

fn training_data(cfg: &RunConfig) -> Result<Option<Array2<f64>>> {
    let mut r = rng::seeded(cfg.seed);
    Ok(match cfg.experiment {
        Experiment::Banana => Some(Target2d::Banana.sample_n(cfg.samples, &mut r)),
        Experiment::Star => Some(Target2d::Star.sample_n(cfg.samples, &mut r)),
        Experiment::Custom => {
            let path = cfg.data.as_ref().expect("validated");
            Some(read_dataset(BufReader::new(File::open(path)?))?)
        }
        Experiment::Cauchy => None,
    })
}

/// `train` and `mcmc-opt`. Everything but the metrics' optional wall times
/// is a function of the config.
pub fn train(cfg: &RunConfig, table: Option<SigmaTable>) -> Result<()> {
    cfg.validate()?;
    let tc = cfg.train_config()?;
    if table.is_some() && table.as_ref().unwrap().points == 0 {
        return Err(Error::Config("grid points must be positive".into()));
    }
    let data = training_data(cfg)?;
    let dim = data.as_ref().map_or(1, |d| d.ncols());
    let model = cfg.build_model(dim)?;

    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml())?;
    if let (Some(d), false) = (&data, cfg.experiment == Experiment::Custom) {
        write_dataset(d, BufWriter::new(File::create(cfg.out.join("data.csv"))?))?;
    }

    let mut metrics = BufWriter::new(File::create(cfg.out.join("metrics.jsonl"))?);
    let mut io_err = None;
    let mut log = |m: &IterMetrics| {
        if io_err.is_none() {
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(metrics, "{line}") {
                io_err = Some(e);
            }
        }
    };
    let outcome: TrainOutcome = match &data {
        Some(d) => train_mle(d, &model, &tc, &mut log)?,
        None => train_kl_target(&snflow::targets::Target1d::Cauchy, &model, &tc, &mut log)?,
    };
    if let Some(e) = io_err {
        return Err(e.into());
    }
    metrics.flush()?;

    let meta = PathMeta {
        kind: tc.path_kind,
        order: tc.path_order,
        horizon: tc.horizon,
    };
    save_model(&outcome.model, meta, &cfg.out.join("checkpoint.bin"))?;
    if let Some(t) = &table {
        write_sigma_table(&outcome.model, t, &cfg.out.join("sigma.csv"))?;
    }
    let summary = json!({
        "final_loss": outcome.history.last().map(|m| m.loss),
        "iters": outcome.history.len(),
        "seed": cfg.seed,
        "aborted": outcome.aborted,
    });
    fs::write(cfg.out.join("summary.json"), format!("{summary}\n"))?;
    match outcome.aborted {
        Some(why) => Err(Error::Estimation(format!("training stopped early ({why}); last good checkpoint written"))),
        None => Ok(()),
    }
}

pub struct DensityJob {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub paths: usize,
    pub kind: Option<PathKind>,
    pub order: Option<usize>,
    pub seed: u64,
    pub lattice: Lattice,
    pub estimator: Estimator,
    pub tol: f64,
    pub render: bool,
}

pub fn density(job: &DensityJob) -> Result<()> {
    if job.paths == 0 || job.lattice.nx == 0 || job.lattice.ny == 0 {
        return Err(Error::Config("paths and grid sizes must be positive".into()));
    }
    let (model, meta) = load_model(&job.checkpoint)?;
    let cfg = DensityConfig {
        solve: SolveConfig::adaptive(job.tol, job.tol),
        seed: job.seed,
        ..DensityConfig::default()
    };
    cfg.solve.validate()?;
    let paths = sample_paths(
        job.kind.unwrap_or(meta.kind),
        model.noise_dim(),
        job.order.unwrap_or(meta.order),
        meta.horizon,
        job.paths,
        job.seed,
    )?;
    fs::create_dir_all(&job.out)?;
    let file = job.out.join("density.csv");
    match model.dim() {
        2 => {
            let values = density_grid(&model, &paths, &job.lattice, job.estimator, &cfg)?;
            job.lattice.write_csv(&values, BufWriter::new(File::create(&file)?))?;
            if job.render {
                render::write_pgm(&values, BufWriter::new(File::create(job.out.join("density.pgm"))?))?;
            }
        }
        1 => {
            let xs = grid(job.lattice.x.0, job.lattice.x.1, job.lattice.nx);
            let pts = Array2::from_shape_vec((xs.len(), 1), xs.clone()).unwrap();
            let est = match job.estimator {
                Estimator::LogMeanExp => logdensity_mc(&model, &paths, &pts, &cfg)?,
                Estimator::MeanBound => elbo_bound(&model, &paths, &pts, &cfg)?,
            };
            let mut w = BufWriter::new(File::create(&file)?);
            writeln!(w, "x,logp")?;
            for (x, v) in xs.iter().zip(&est.aggregate) {
                writeln!(w, "{x},{v}")?;
            }
            w.flush()?;
        }
        d => return Err(Error::Config(format!("density grids cover one or two dimensions, model has {d}"))),
    }
    Ok(())
}

pub struct SampleJob {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub chain: bool,
    pub count: usize,
    pub dt: f64,
    pub burn_in: usize,
    pub seed: u64,
    pub tol: f64,
    pub bins: usize,
    pub hist_range: (f64, f64),
    pub render: bool,
}

/// One Euler–Maruyama trajectory from a prior draw, after `burn_in` steps.
fn chain(model: &SdeModel, job: &SampleJob) -> Result<(Vec<f64>, Array2<f64>)> {
    let mut r = rng::seeded(job.seed);
    let z0 = snflow::density::prior_sample(1, model.dim(), &mut r);
    let states = euler_maruyama_chain(model, &z0, job.dt, job.burn_in, job.count, &mut r)?;
    let times = (0..states.nrows()).map(|k| (job.burn_in + k) as f64 * job.dt).collect();
    Ok((times, states))
}

fn write_histogram(values: &[f64], job: &SampleJob, reference: Option<&dyn Fn(f64) -> f64>, file: &Path) -> Result<()> {
    let (lo, hi) = job.hist_range;
    let width = (hi - lo) / job.bins as f64;
    let mut counts = vec![0usize; job.bins];
    for v in values {
        if (lo..hi).contains(v) {
            counts[(((v - lo) / width) as usize).min(job.bins - 1)] += 1;
        }
    }
    let mut w = BufWriter::new(File::create(file)?);
    write!(w, "lo,hi,count,density")?;
    if reference.is_some() {
        write!(w, ",reference")?;
    }
    writeln!(w)?;
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        let b = a + width;
        write!(w, "{a},{b},{c},{}", *c as f64 / (values.len() as f64 * width))?;
        if let Some(f) = reference {
            write!(w, ",{}", f(0.5 * (a + b)))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sample(job: &SampleJob) -> Result<()> {
    if job.count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    if job.chain && !(job.dt > 0.0 && job.dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {}", job.dt)));
    }
    let (model, meta) = load_model(&job.checkpoint)?;
    fs::create_dir_all(&job.out)?;
    let values = if job.chain {
        let (times, states) = chain(&model, job)?;
        let mut w = BufWriter::new(File::create(job.out.join("chain.csv"))?);
        let header: Vec<String> = std::iter::once("t".to_string()).chain((1..=model.dim()).map(|i| format!("z_{i}"))).collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, row) in times.iter().zip(states.rows()) {
            let cells: Vec<String> = std::iter::once(t.to_string()).chain(row.iter().map(|v| v.to_string())).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()?;
        states
    } else {
        let paths = sample_paths(meta.kind, model.noise_dim(), meta.order, meta.horizon, job.count, job.seed)?;
        let cfg = DensityConfig {
            solve: SolveConfig::adaptive(job.tol, job.tol),
            seed: job.seed,
            ..DensityConfig::default()
        };
        cfg.solve.validate()?;
        let mut r = rng::stream(job.seed, 1);
        let (zt, _) = sample_forward(&model, Noise::PerRow(&paths), None, job.count, &cfg, None, &mut r)?;
        write_dataset(&zt, BufWriter::new(File::create(job.out.join("samples.csv"))?))?;
        zt
    };
    if model.dim() == 1 && job.bins > 0 {
        let target = match model.drift() {
            Drift::Ergodic { target, .. } => Some(*target),
            _ => None,
        };
        let reference = target.map(|t| move |x: f64| t.logdensity(x).exp());
        let col: Array1<f64> = values.column(0).to_owned();
        write_histogram(
            col.as_slice().unwrap(),
            job,
            reference.as_ref().map(|f| f as &dyn Fn(f64) -> f64),
            &job.out.join("histogram.csv"),
        )?;
    }
    if model.dim() == 2 && job.render {
        render::write_svg_scatter(values.view(), BufWriter::new(File::create(job.out.join("samples.svg"))?))?;
    }
    Ok(())
}

pub fn path(kind: PathKind, order: usize, dim: usize, horizon: f64, seed: u64, points: usize, out: &Path) -> Result<()> {
    if points < 2 {
        return Err(Error::Config("need at least two evaluation points".into()));
    }
    let p = sample_paths(kind, dim, order, horizon, 1, seed)?.remove(0);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    p.write_csv(&grid(0.0, horizon, points), BufWriter::new(File::create(out)?))
}
