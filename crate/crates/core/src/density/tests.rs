use approx::assert_relative_eq;
use ndarray::{array, Array1};

use super::*;
use crate::dynamics::{Diffusion, Drift};
use crate::nets::{Activation, MlpSpec};
use crate::rng::seeded;

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (x - mean).powi(2) / var - 0.5 * (2.0 * PI * var).ln()
}

fn constant_model() -> SdeModel {
    SdeModel::new(
        2,
        2,
        Drift::Constant { mu: vec![0.3, -0.2] },
        Diffusion::Constant { sigma: vec![vec![1.0, 0.2], vec![0.0, 0.5]] },
        Array1::zeros(0),
    )
    .unwrap()
}

fn ou() -> SdeModel {
    SdeModel::new(1, 1, Drift::Linear { a: vec![vec![-1.0]] }, Diffusion::identity(1), Array1::zeros(0)).unwrap()
}

fn contraction() -> SdeModel {
    SdeModel::new(1, 1, Drift::Linear { a: vec![vec![-1.0]] }, Diffusion::zero(1, 1), Array1::zeros(0)).unwrap()
}

fn smooth_model(seed: u64) -> SdeModel {
    let drift = MlpSpec::new(vec![2, 16, 16, 2], Activation::Tanh, false).unwrap();
    let sigma = MlpSpec::new(vec![2, 16, 2], Activation::Tanh, false).unwrap();
    let m = SdeModel::init(2, 2, Drift::Net { spec: drift }, Diffusion::OffDiag { lambda: 0.7, spec: sigma }, seed).unwrap();
    m.with_params(m.params().mapv(|v| v * 25.0)).unwrap()
}

fn kl_paths(m: usize, n: usize, count: usize, seed: u64) -> Vec<BrownianApprox> {
    let mut rng = seeded(seed);
    (0..count).map(|_| BrownianApprox::sample_kl(m, n, 1.0, &mut rng).unwrap()).collect()
}

#[test]
fn identity_flow_returns_the_prior() {
    let model = SdeModel::new(2, 2, Drift::Zero, Diffusion::zero(2, 2), Array1::zeros(0)).unwrap();
    let path = &kl_paths(2, 4, 1, 0)[0];
    let x = array![[0.3, -1.2], [2.0, 0.0]];
    let cfg = DensityConfig::default();
    let lp = logdensity_single_path(&model, Noise::Shared(path), &x, &cfg, None).unwrap();
    assert_eq!(lp, prior_logdensity(&x));
    let (z, lq) = sample_forward(&model, Noise::Shared(path), Some(&x), 2, &cfg, None, &mut seeded(0)).unwrap();
    assert_eq!(z, x);
    assert_eq!(lq, prior_logdensity(&x));
}

#[test]
fn constant_coefficients_give_the_gaussian_conditional() {
    let model = constant_model();
    let cfg = DensityConfig::default();
    let x = array![[0.5, 0.5], [-1.0, 2.0], [3.0, -3.0]];
    for path in kl_paths(2, 8, 5, 3) {
        let w = path.omega().column(0).to_owned();
        let lp = logdensity_single_path(&model, Noise::Shared(&path), &x, &cfg, None).unwrap();
        for (r, row) in x.rows().into_iter().enumerate() {
            let m0 = 0.3 + w[0] + 0.2 * w[1];
            let m1 = -0.2 + 0.5 * w[1];
            let expect = normal_logpdf(row[0] - m0, 0.0, 1.0) + normal_logpdf(row[1] - m1, 0.0, 1.0);
            assert!((lp[r] - expect).abs() < 1e-5, "{} vs {expect}", lp[r]);
        }
    }
}

#[test]
fn contraction_examples() {
    let model = contraction();
    let path = &kl_paths(1, 4, 1, 0)[0];
    let cfg = DensityConfig::default();
    let x = array![[0.4], [-1.5]];
    let lp = logdensity_single_path(&model, Noise::Shared(path), &x, &cfg, None).unwrap();
    for (v, xi) in lp.iter().zip(x.iter()) {
        assert_relative_eq!(*v, normal_logpdf(xi * 1f64.exp(), 0.0, 1.0) + 1.0, epsilon = 1e-6);
    }
    let z0 = array![[1.0], [2.0]];
    let (zt, lq) = sample_forward(&model, Noise::Shared(path), Some(&z0), 2, &cfg, None, &mut seeded(0)).unwrap();
    for r in 0..2 {
        assert_relative_eq!(zt[[r, 0]], z0[[r, 0]] / 1f64.exp(), epsilon = 1e-8);
        assert_relative_eq!(lq[r], normal_logpdf(z0[[r, 0]], 0.0, 1.0) + 1.0, epsilon = 1e-8);
    }
}

#[test]
fn forward_and_reverse_agree_on_the_same_path() {
    let cfg = DensityConfig::default();
    for seed in 0..3 {
        let model = smooth_model(seed);
        let path = &kl_paths(2, 6, 1, 10 + seed)[0];
        let (zt, lq) = sample_forward(&model, Noise::Shared(path), None, 4, &cfg, None, &mut seeded(seed)).unwrap();
        let lp = logdensity_single_path(&model, Noise::Shared(path), &zt, &cfg, None).unwrap();
        for (a, b) in lp.iter().zip(lq.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        // The flow actually moved the points.
        assert!(lq.iter().zip(prior_logdensity(&zt).iter()).any(|(a, b)| (a - b).abs() > 1e-2));
    }
}

#[test]
fn forward_round_trip_with_piecewise_linear_paths() {
    let model = smooth_model(4);
    let path = BrownianApprox::sample_pl_uniform(2, 7, 1.0, &mut seeded(1)).unwrap();
    let gap = |align_knots: bool| {
        let cfg = DensityConfig {
            solve: SolveConfig {
                align_knots,
                ..SolveConfig::adaptive(1e-8, 1e-8)
            },
            ..DensityConfig::default()
        };
        let (zt, lq) = sample_forward(&model, Noise::Shared(&path), None, 3, &cfg, None, &mut seeded(2)).unwrap();
        let lp = logdensity_single_path(&model, Noise::Shared(&path), &zt, &cfg, None).unwrap();
        (&lp - &lq).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let aligned = gap(true);
    assert!(aligned < 1e-6, "{aligned}");
    // Stepping across the kinks costs accuracy at the same tolerance.
    assert!(gap(false) > 10.0 * aligned);
}

/// `∫₀¹ e^{−(1−s)} ḃ(s) ds` by Simpson's rule.
fn ou_mean(path: &BrownianApprox) -> f64 {
    let n = 2000;
    let h = 1.0 / n as f64;
    (0..=n)
        .map(|k| {
            let s = k as f64 * h;
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            w * (-(1.0 - s)).exp() * path.deriv(s).unwrap()[0]
        })
        .sum::<f64>()
        * h
        / 3.0
}

#[test]
fn ou_conditionals_and_estimators() {
    let model = ou();
    let paths = kl_paths(1, 8, 16, 5);
    let x = array![[0.0], [1.0], [-1.0]];
    let cfg = DensityConfig::default();
    let mc = logdensity_mc(&model, &paths, &x, &cfg).unwrap();
    let lb = elbo_bound(&model, &paths, &x, &cfg).unwrap();
    assert_eq!(mc.conditional.dim(), (16, 3));
    assert_eq!((mc.paths, mc.failed), (16, 0));
    let var = (-2.0f64).exp();
    for (i, p) in paths.iter().enumerate() {
        let m = ou_mean(p);
        for r in 0..3 {
            assert!((mc.conditional[[i, r]] - normal_logpdf(x[[r, 0]], m, var)).abs() < 1e-6);
        }
    }
    for r in 0..3 {
        let col = mc.conditional.column(r);
        let lme = (col.iter().map(|v| v.exp()).sum::<f64>() / 16.0).ln();
        assert_relative_eq!(mc.aggregate[r], lme, epsilon = 1e-12);
        assert_relative_eq!(lb.aggregate[r], col.mean().unwrap(), epsilon = 1e-12);
        assert!(lb.aggregate[r] < mc.aggregate[r]);
    }
    assert_eq!(lb.estimator, Estimator::MeanBound);
}

#[test]
fn single_and_duplicated_paths() {
    let model = ou();
    let paths = kl_paths(1, 4, 1, 9);
    let x = array![[0.3]];
    let cfg = DensityConfig::default();
    let one = logdensity_mc(&model, &paths, &x, &cfg).unwrap();
    let single = logdensity_single_path(&model, Noise::Shared(&paths[0]), &x, &cfg, None).unwrap();
    assert_relative_eq!(one.aggregate[0], single[0], epsilon = 1e-14);
    let bound = elbo_bound(&model, &paths, &x, &cfg).unwrap();
    assert_relative_eq!(bound.aggregate[0], one.aggregate[0], epsilon = 1e-14);
    let dup = vec![paths[0].clone(); 5];
    let five = logdensity_mc(&model, &dup, &x, &cfg).unwrap();
    assert_relative_eq!(five.aggregate[0], one.aggregate[0], epsilon = 1e-12);
    assert!(logdensity_mc(&model, &[], &x, &cfg).is_err());
}

#[test]
fn zero_noise_is_path_independent() {
    let drift = MlpSpec::new(vec![2, 8, 2], Activation::Tanh, false).unwrap();
    let sigma = MlpSpec::new(vec![2, 8, 2], Activation::Tanh, false).unwrap();
    let m = SdeModel::init(2, 2, Drift::Net { spec: drift }, Diffusion::OffDiag { lambda: 0.0, spec: sigma }, 6).unwrap();
    let m = m.with_params(m.params().mapv(|v| v * 25.0)).unwrap();
    let x = array![[0.2, 0.1], [1.0, -1.0]];
    let cfg = DensityConfig::default();
    let est = logdensity_mc(&m, &kl_paths(2, 6, 4, 2), &x, &cfg).unwrap();
    for r in 0..2 {
        let c = est.conditional.column(r);
        assert!(c.iter().all(|v| (v - c[0]).abs() < 1e-10), "{c}");
        assert_relative_eq!(est.aggregate[r], c[0], epsilon = 1e-10);
    }
}

#[test]
fn probe_mode_is_used_above_the_exact_dimension() {
    // Diagonal linear drift: Rademacher probes give the exact trace.
    let a = vec![vec![-1.0, 0.0, 0.0], vec![0.0, 0.5, 0.0], vec![0.0, 0.0, -0.2]];
    let m = SdeModel::new(3, 3, Drift::Linear { a }, Diffusion::identity(3), Array1::zeros(0)).unwrap();
    let paths = kl_paths(3, 4, 3, 1);
    let x = array![[0.1, 0.2, 0.3]];
    let exact = logdensity_mc(&m, &paths, &x, &DensityConfig::default()).unwrap();
    let mut cfg = DensityConfig::default();
    cfg.field.exact_max_dim = 0;
    let probed = logdensity_mc(&m, &paths, &x, &cfg).unwrap();
    assert_relative_eq!(exact.conditional, probed.conditional, epsilon = 1e-8);
}

#[test]
fn all_paths_failing_is_an_estimation_error() {
    let cfg = DensityConfig {
        solve: SolveConfig {
            max_steps: 1,
            ..SolveConfig::adaptive(1e-12, 1e-12)
        },
        ..DensityConfig::default()
    };
    let err = logdensity_mc(&smooth_model(0), &kl_paths(2, 4, 2, 0), &array![[0.0, 0.0]], &cfg).unwrap_err();
    assert!(matches!(err, Error::Estimation(_)), "{err}");
    assert!(logdensity_mc(&ou(), &kl_paths(1, 4, 1, 0), &array![[0.0, 0.0]], &DensityConfig::default()).is_err());
}

#[test]
fn lattice_and_grid() {
    let lat = Lattice {
        x: (-1.0, 1.0),
        y: (0.0, 2.0),
        nx: 3,
        ny: 2,
    };
    let pts = lat.points();
    assert_eq!(pts.row(0).to_vec(), vec![-1.0, 0.0]);
    assert_eq!(pts.row(2).to_vec(), vec![1.0, 0.0]);
    assert_eq!(pts.row(3).to_vec(), vec![-1.0, 2.0]);
    let model = constant_model();
    let paths = kl_paths(2, 4, 2, 0);
    let grid = density_grid(&model, &paths, &lat, Estimator::LogMeanExp, &DensityConfig::default()).unwrap();
    assert_eq!(grid.dim(), (2, 3));
    let direct = logdensity_mc(&model, &paths, &array![[1.0, 2.0]], &DensityConfig::default()).unwrap();
    // Step control sees the whole batch, so agreement is to solver tolerance.
    assert_relative_eq!(grid[[1, 2]], direct.aggregate[0], epsilon = 1e-6);
    let mut buf = Vec::new();
    lat.write_csv(&grid, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,logp"));
    assert_eq!(text.lines().count(), 7);
    assert!(density_grid(&ou(), &paths, &lat, Estimator::MeanBound, &DensityConfig::default()).is_err());
}

#[test]
fn log_mean_exp_is_stable() {
    assert_relative_eq!(log_mean_exp([1000.0, 1000.0]), 1000.0);
    assert_relative_eq!(log_mean_exp([-1000.0, -1000.0 + 2f64.ln()]), -1000.0 + 1.5f64.ln(), epsilon = 1e-12);
    assert_eq!(log_mean_exp([f64::NEG_INFINITY]), f64::NEG_INFINITY);
}

