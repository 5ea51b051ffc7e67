use approx::assert_relative_eq;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::dynamics::{Diffusion, Drift, ScalarMap};
use crate::nets::{Activation, MlpSpec};
use crate::paths::BrownianApprox;
use crate::rng::seeded;

fn scalar(v: f64) -> Tensor {
    array![[v]]
}

fn exp_field(_: f64, y: &Tensor) -> Result<Tensor> {
    Ok(y.clone())
}

fn gbm(corrected_map: ScalarMap) -> SdeModel {
    SdeModel::new(1, 1, Drift::Zero, Diffusion::Diagonal { map: corrected_map }, Array1::zeros(0)).unwrap()
}

/// A smooth nonlinear 2-D field (damped pendulum with forcing).
fn pendulum(t: f64, y: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(y.dim());
    for (mut o, r) in out.rows_mut().into_iter().zip(y.rows()) {
        o[0] = r[1];
        o[1] = -r[0].sin() - 0.1 * r[1] + 0.3 * (2.0 * t).cos();
    }
    Ok(out)
}

#[test]
fn rk4_exponential() {
    let traj = odesolve(exp_field, &scalar(1.0), 0.0, 1.0, &SolveConfig::rk4(1000), &[]).unwrap();
    assert!((traj.last()[[0, 0]] - std::f64::consts::E).abs() < 1e-9);
    assert_eq!(traj.stats.steps, 1000);
    assert_eq!(traj.stats.evals, 4000);
    assert_eq!(traj.end_time(), 1.0);
}

#[test]
fn zero_field_is_exact() {
    let y0 = array![[1.5, -2.0], [0.1, 3.0]];
    for cfg in [SolveConfig::rk4(7), SolveConfig::adaptive(1e-8, 1e-8)] {
        let traj = odesolve(|_, y: &Tensor| Ok(Tensor::zeros(y.dim())), &y0, 0.0, 2.0, &cfg, &[]).unwrap();
        assert_eq!(traj.last(), &y0);
    }
}

#[test]
fn rk4_is_fourth_order() {
    // Below h ≈ 1e−2 the error of this problem hits round-off, so the fit
    // stops there.
    let hs = [0.1f64, 0.05, 0.025, 0.0125];
    let errs: Vec<f64> = hs
        .iter()
        .map(|h| {
            let steps = (1.0 / h) as usize;
            let y = odesolve(exp_field, &scalar(1.0), 0.0, 1.0, &SolveConfig::rk4(steps), &[]).unwrap().into_last();
            (y[[0, 0]] - std::f64::consts::E).abs()
        })
        .collect();
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope - 4.0).abs() < 0.2, "slope {slope}, errors {errs:?}");
}

#[test]
fn adaptive_matches_fine_rk4() {
    // Global error is a sum of local errors, so the 10·rtol budget is stated
    // for the unit horizon the flows use.
    let y0 = array![[1.0, 0.0], [-0.5, 2.0]];
    let reference = odesolve(pendulum, &y0, 0.0, 1.0, &SolveConfig::rk4(100_000), &[]).unwrap().into_last();
    for rtol in [1e-6, 1e-8] {
        let traj = odesolve(pendulum, &y0, 0.0, 1.0, &SolveConfig::adaptive(rtol, rtol), &[]).unwrap();
        let err = (traj.last() - &reference).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 10.0 * rtol, "rtol {rtol}: {err}");
        assert!(traj.stats.steps < 50, "{:?}", traj.stats);
    }
}

#[test]
fn reverse_solve_round_trips() {
    let y0 = array![[0.7, -0.3]];
    let cfg = SolveConfig::adaptive(1e-8, 1e-8);
    let fwd = odesolve(pendulum, &y0, 0.0, 3.0, &cfg, &[]).unwrap();
    let back = odesolve(pendulum, fwd.last(), 3.0, 0.0, &cfg, &[]).unwrap();
    let err = (back.last() - &y0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-6, "{err}");
    assert_eq!(back.end_time(), 0.0);

    let e = odesolve(exp_field, &scalar(std::f64::consts::E), 1.0, 0.0, &SolveConfig::rk4(1000), &[]).unwrap();
    assert!((e.last()[[0, 0]] - 1.0).abs() < 1e-9);
}

#[test]
fn saved_times_are_monotone() {
    for (t0, t1) in [(0.0, 2.0), (2.0, 0.0)] {
        for cfg in [SolveConfig::rk4(10).saving(), SolveConfig::adaptive(1e-6, 1e-6).saving()] {
            let traj = odesolve(pendulum, &array![[1.0, 0.0]], t0, t1, &cfg, &[0.5, 1.5]).unwrap();
            assert_eq!(traj.times.len(), traj.states.len());
            assert_eq!(traj.times[0], t0);
            assert_eq!(traj.end_time(), t1);
            let sign = (t1 - t0).signum();
            assert!(traj.times.windows(2).all(|w| (w[1] - w[0]) * sign > 0.0));
            // Knots are step boundaries.
            for k in [0.5, 1.5] {
                assert!(traj.times.iter().any(|t| (t - k).abs() < 1e-12), "{k} not in {:?}", traj.times);
            }
        }
    }
}

#[test]
fn knot_alignment_integrates_piecewise_linear_paths_exactly() {
    let mut rng = seeded(4);
    let grid = vec![0.0, 0.13, 0.5, 0.61, 0.9, 1.0];
    let path = BrownianApprox::sample_pl(2, &grid, &mut rng).unwrap();
    let field = |t: f64, y: &Tensor| -> Result<Tensor> {
        let d = path.deriv(t)?;
        Ok(Tensor::from_shape_fn(y.dim(), |(_, j)| d[j]))
    };
    let end = path.eval(1.0).unwrap();
    let y0 = Tensor::zeros((1, 2));
    for cfg in [SolveConfig::rk4(3), SolveConfig::adaptive(1e-6, 1e-6)] {
        let y = odesolve(field, &y0, 0.0, 1.0, &cfg, path.breakpoints()).unwrap().into_last();
        assert_relative_eq!(y.row(0), end.view(), epsilon = 1e-12);
        // Reverse from the endpoint returns to the origin.
        let back = odesolve(field, &y, 1.0, 0.0, &cfg, path.breakpoints()).unwrap().into_last();
        assert!(back.iter().all(|v| v.abs() < 1e-12), "{back}");
    }
    let unaligned = SolveConfig {
        align_knots: false,
        ..SolveConfig::rk4(3)
    };
    let y = odesolve(field, &y0, 0.0, 1.0, &unaligned, path.breakpoints()).unwrap().into_last();
    assert!((&y.row(0) - &end).iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn solver_failures() {
    let blowup = |_: f64, y: &Tensor| Ok(y.mapv(|v| v * v));
    let err = odesolve(blowup, &scalar(1.0), 0.0, 2.0, &SolveConfig::rk4(50), &[]).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    let err = odesolve(blowup, &scalar(1.0), 0.0, 2.0, &SolveConfig::adaptive(1e-8, 1e-8), &[]).unwrap_err();
    assert!(matches!(err, Error::Stiff { .. }), "{err}");
    assert!(err.is_numerical());

    let capped = SolveConfig {
        max_steps: 5,
        ..SolveConfig::adaptive(1e-10, 1e-10)
    };
    assert!(matches!(odesolve(pendulum, &array![[1.0, 0.0]], 0.0, 10.0, &capped, &[]), Err(Error::Stiff { .. })));
    assert!(matches!(odesolve(exp_field, &scalar(1.0), 0.0, 1.0, &SolveConfig::rk4(0), &[]), Err(Error::Config(_))));
    assert!(odesolve(exp_field, &scalar(1.0), 0.0, 1.0, &SolveConfig::adaptive(0.0, 1e-6), &[]).is_err());
    let wrong = |_: f64, _: &Tensor| Ok(Tensor::zeros((2, 2)));
    assert!(odesolve(wrong, &scalar(1.0), 0.0, 1.0, &SolveConfig::rk4(1), &[]).is_err());
}

#[test]
fn adaptive_survives_transient_overflow() {
    // Trial stages far from the solution overflow; the step must shrink instead of failing.
    let field = |_: f64, y: &Tensor| Ok(y.mapv(|v| if v.abs() > 50.0 { f64::INFINITY } else { -v }));
    let cfg = SolveConfig::adaptive(1e-6, 1e-6);
    let traj = odesolve(field, &scalar(40.0), 0.0, 1.0, &cfg, &[]).unwrap();
    assert!((traj.last()[[0, 0]] - 40.0 / std::f64::consts::E).abs() < 1e-4);
}

#[test]
fn trajectory_csv() {
    let traj = odesolve(exp_field, &array![[1.0, 2.0, 0.0]], 0.0, 1.0, &SolveConfig::rk4(2).saving(), &[]).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(0, true, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,z_1,z_2,delta_logp");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,1,2,0"));
    assert!(traj.write_csv(1, false, Vec::new()).is_err());
}

fn increments(steps: usize, rows: usize, dt: f64, seed: u64) -> Vec<Tensor> {
    let mut rng = seeded(seed);
    (0..steps)
        .map(|_| Tensor::from_shape_simple_fn((rows, 1), || dt.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut rng)))
        .collect()
}

fn coarsen(fine: &[Tensor], factor: usize) -> Vec<Tensor> {
    fine.chunks(factor).map(|c| c.iter().fold(Tensor::zeros(c[0].dim()), |a, b| a + b)).collect()
}

fn uniform(steps: usize, t: f64) -> Vec<f64> {
    (0..=steps).map(|k| t * k as f64 / steps as f64).collect()
}

#[test]
fn euler_maruyama_examples() {
    // No noise: forward Euler of dz/dt = −z.
    let ou = SdeModel::new(1, 1, Drift::Linear { a: vec![vec![-1.0]] }, Diffusion::zero(1, 1), Array1::zeros(0)).unwrap();
    let z = euler_maruyama(&ou, &scalar(1.0), &uniform(10, 1.0), &increments(10, 1, 0.1, 0)).unwrap();
    assert_relative_eq!(z[[0, 0]], 0.9f64.powi(10), epsilon = 1e-14);

    // Constant coefficients: exact.
    let c = SdeModel::new(
        2,
        2,
        Drift::Constant { mu: vec![0.3, -0.2] },
        Diffusion::Constant { sigma: vec![vec![1.0, 0.2], vec![0.0, 0.5]] },
        Array1::zeros(0),
    )
    .unwrap();
    let mut rng = seeded(1);
    let dws: Vec<Tensor> = (0..8).map(|_| Tensor::from_shape_simple_fn((1, 2), || 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng))).collect();
    let total = dws.iter().fold(Tensor::zeros((1, 2)), |a, b| a + b);
    let z = euler_maruyama(&c, &array![[1.0, 1.0]], &uniform(8, 2.0), &dws).unwrap();
    let expect = array![[1.0 + 0.6 + total[[0, 0]] + 0.2 * total[[0, 1]], 1.0 - 0.4 + 0.5 * total[[0, 1]]]];
    assert_relative_eq!(z, expect, epsilon = 1e-13);
    let m = milstein(&c, &array![[1.0, 1.0]], &uniform(8, 2.0), &dws).unwrap();
    assert_eq!(m, z);

    assert!(euler_maruyama(&c, &array![[1.0, 1.0]], &uniform(8, 2.0), &dws[..3]).is_err());
    assert!(euler_maruyama(&c, &array![[1.0, 1.0]], &[0.0, 0.0, 1.0], &dws[..2]).is_err());
}

#[test]
fn milstein_single_gbm_step() {
    let model = gbm(ScalarMap::Proportional { c: 1.0 });
    let (z0, db, dt) = (1.3, 0.4, 0.25);
    let z = milstein(&model, &scalar(z0), &[0.0, dt], &[scalar(db)]).unwrap();
    assert_relative_eq!(z[[0, 0]], z0 + z0 * db + 0.5 * z0 * (db * db - dt), epsilon = 1e-14);
}

#[test]
fn strong_errors_on_gbm() {
    let model = gbm(ScalarMap::Proportional { c: 1.0 });
    let rows = 400;
    let fine = increments(512, rows, 1.0 / 512.0, 7);
    let b_t = coarsen(&fine, 512).remove(0);
    let exact = b_t.mapv(|b| (-0.5 + b).exp());
    let z0 = Tensor::ones((rows, 1));
    let err = |z: Tensor| (z - &exact).mapv(f64::abs).mean().unwrap();
    let mut em_errs = Vec::new();
    let mut mil_errs = Vec::new();
    for steps in [8, 32, 128, 512] {
        let dws = coarsen(&fine, 512 / steps);
        em_errs.push(err(euler_maruyama(&model, &z0, &uniform(steps, 1.0), &dws).unwrap()));
        mil_errs.push(err(milstein(&model, &z0, &uniform(steps, 1.0), &dws).unwrap()));
    }
    assert!(em_errs.windows(2).all(|w| w[1] < w[0]), "{em_errs:?}");
    assert!(mil_errs.windows(2).all(|w| w[1] < w[0]), "{mil_errs:?}");
    assert!(mil_errs.iter().zip(&em_errs).all(|(m, e)| m < e), "{mil_errs:?} vs {em_errs:?}");
    // Milstein is strong order 1, Euler–Maruyama ½: over a 64× refinement
    // the ratio of their gains should be clear.
    assert!(mil_errs[0] / mil_errs[3] > 30.0 && em_errs[0] / em_errs[3] < 16.0);
}

#[test]
fn milstein_rejects_non_commutative_noise() {
    let spec = MlpSpec::new(vec![2, 4, 2], Activation::Tanh, false).unwrap();
    let m = SdeModel::init(2, 2, Drift::Zero, Diffusion::OffDiag { lambda: 1.0, spec }, 0).unwrap();
    let dws = vec![Tensor::zeros((1, 2))];
    assert!(matches!(milstein(&m, &array![[0.0, 0.0]], &[0.0, 0.1], &dws), Err(Error::Unsupported(_))));
    assert!(euler_maruyama(&m, &array![[0.0, 0.0]], &[0.0, 0.1], &dws).is_ok());
}

#[test]
fn wz_with_zero_noise_is_a_plain_cnf() {
    let spec = MlpSpec::new(vec![2, 8, 2], Activation::Tanh, false).unwrap();
    let noisy = SdeModel::init(2, 2, Drift::Net { spec: spec.clone() }, Diffusion::OffDiag { lambda: 0.0, spec }, 3).unwrap();
    let noisy = noisy.with_params(noisy.params().mapv(|v| v * 20.0)).unwrap();
    let plain = noisy.without_noise();
    let path = BrownianApprox::sample_kl(2, 6, 1.0, &mut seeded(0)).unwrap();
    let z0 = array![[0.5, -0.5], [1.0, 2.0]];
    let cfg = SolveConfig::rk4(40);
    let field = FieldConfig::default();
    let a = wz_solve(&noisy, Noise::Shared(&path), &z0, &cfg, &field).unwrap().into_last();
    let b = odesolve(|t, z| plain.drift_value(z, t), &z0, 0.0, 1.0, &cfg, &[]).unwrap().into_last();
    assert_eq!(a, b);
    assert!((&a - &z0).iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn wz_constant_coefficients_hit_the_kl_endpoint() {
    let model = SdeModel::new(
        2,
        2,
        Drift::Constant { mu: vec![0.3, -0.2] },
        Diffusion::Constant { sigma: vec![vec![1.0, 0.2], vec![0.0, 0.5]] },
        Array1::zeros(0),
    )
    .unwrap();
    let t = 1.7;
    let path = BrownianApprox::sample_kl(2, 8, t, &mut seeded(5)).unwrap();
    let w0: Vec<f64> = path.omega().column(0).iter().map(|w| w * t.sqrt()).collect();
    let z0 = array![[1.0, -1.0]];
    let expect = array![[1.0 + 0.3 * t + w0[0] + 0.2 * w0[1], -1.0 - 0.2 * t + 0.5 * w0[1]]];
    for cfg in [SolveConfig::rk4(64), SolveConfig::adaptive(1e-10, 1e-10)] {
        let z = wz_solve(&model, Noise::Shared(&path), &z0, &cfg, &FieldConfig::default()).unwrap().into_last();
        assert_relative_eq!(z, expect, epsilon = 1e-8);
    }
}

#[test]
fn wz_gbm_follows_the_stratonovich_solution_path_by_path() {
    // With the correction, dz/dt = −z/2 + z ḃ solves to z0·exp(−t/2 + b(t)),
    // and the KL endpoint is b(T) = ω₀√T for any order.
    let model = gbm(ScalarMap::Proportional { c: 1.0 });
    let mut rng = seeded(12);
    let paths: Vec<BrownianApprox> = (0..200).map(|_| BrownianApprox::sample_kl(1, 16, 1.0, &mut rng).unwrap()).collect();
    let z0 = Tensor::ones((200, 1));
    let cfg = SolveConfig::rk4(200);
    let z = wz_solve(&model, Noise::PerRow(&paths), &z0, &cfg, &FieldConfig::default()).unwrap().into_last();
    let raw = FieldConfig {
        ito_correction: false,
        ..FieldConfig::default()
    };
    let zu = wz_solve(&model, Noise::PerRow(&paths), &z0, &cfg, &raw).unwrap().into_last();
    for (i, p) in paths.iter().enumerate() {
        let w = p.omega()[[0, 0]];
        assert_relative_eq!(z[[i, 0]].ln(), -0.5 + w, epsilon = 1e-6);
        assert_relative_eq!(zu[[i, 0]].ln(), w, epsilon = 1e-6);
    }
}

#[test]
fn augmented_contraction() {
    let model = SdeModel::new(1, 1, Drift::Linear { a: vec![vec![-1.0]] }, Diffusion::zero(1, 1), Array1::zeros(0)).unwrap();
    let path = BrownianApprox::sample_kl(1, 4, 1.0, &mut seeded(0)).unwrap();
    let y0 = augment(&array![[2.0], [-1.0]]);
    let y = wz_solve_augmented(&model, Noise::Shared(&path), &y0, &SolveConfig::adaptive(1e-10, 1e-10), &FieldConfig::default(), None)
        .unwrap()
        .into_last();
    let (z, dl) = split_augmented(&y);
    assert_relative_eq!(z, array![[2.0], [-1.0]] / std::f64::consts::E, epsilon = 1e-9);
    assert_relative_eq!(dl, array![[1.0], [1.0]], epsilon = 1e-9);
    let back = wz_solve_augmented(
        &model,
        Noise::Shared(&path),
        &y,
        &SolveConfig::adaptive(1e-10, 1e-10).reverse(),
        &FieldConfig::default(),
        None,
    )
    .unwrap()
    .into_last();
    assert_relative_eq!(back, y0, epsilon = 1e-8);
    assert!(wz_solve_augmented(&model, Noise::Shared(&path), &array![[1.0]], &SolveConfig::rk4(1), &FieldConfig::default(), None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_systems_match_matrix_exponential_bound(a in -1.0f64..1.0, b in -1.0f64..1.0, y0 in -2.0f64..2.0) {
        // dy/dt = (a + b t) y  ⇒  y(1) = y0 exp(a + b/2).
        let field = move |t: f64, y: &Tensor| Ok(y * (a + b * t));
        let exact = y0 * (a + 0.5 * b).exp();
        let r = odesolve(field, &scalar(y0), 0.0, 1.0, &SolveConfig::rk4(200), &[]).unwrap().into_last();
        prop_assert!((r[[0, 0]] - exact).abs() < 1e-9);
        let ad = odesolve(field, &scalar(y0), 0.0, 1.0, &SolveConfig::adaptive(1e-9, 1e-9), &[]).unwrap().into_last();
        prop_assert!((ad[[0, 0]] - exact).abs() < 1e-7);
    }

    #[test]
    fn rows_integrate_independently(ys in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let batch = Array2::from_shape_vec((2, 2), ys.clone()).unwrap();
        let cfg = SolveConfig::rk4(20);
        let both = odesolve(pendulum, &batch, 0.0, 1.0, &cfg, &[]).unwrap().into_last();
        for r in 0..2 {
            let one = odesolve(pendulum, &batch.slice(s![r..r + 1, ..]).to_owned(), 0.0, 1.0, &cfg, &[]).unwrap().into_last();
            prop_assert_eq!(one.row(0), both.row(r));
        }
    }
}

