use approx::assert_relative_eq;
use proptest::prelude::*;

use super::*;
use crate::rng::seeded;

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut acc = f(a) + f(b);
    for k in 1..panels {
        acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn banana_normalization() {
    assert_relative_eq!(banana_logdensity(0.0, 0.0), -(2.0 * PI * 2f64.sqrt()).ln(), epsilon = 1e-15);
    assert_relative_eq!(banana_logdensity(0.0, 0.0), -2.18445, epsilon = 1e-5);
    assert_eq!(banana_logdensity(1.3, -0.4), banana_logdensity(-1.3, -0.4));
    let mass = simpson(|x| simpson(|y| banana_logdensity(x, y).exp(), -70.0, 10.0, 3200), -8.0, 8.0, 800);
    assert!((mass - 1.0).abs() < 1e-4, "mass {mass}");
}

#[test]
fn banana_sample_moments() {
    // Five checks at once; 4 SE keeps the family-wise false alarm rate near 3e-4.
    const Z: f64 = 4.0;
    let mut rng = seeded(1);
    let n = 100_000;
    let draws: Vec<(f64, f64)> = (0..n).map(|_| banana_sample(&mut rng)).collect();
    let xs: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let us: Vec<f64> = draws.iter().map(|d| d.0 * d.0 + d.1).collect();
    let (mx, sx) = mean_and_se(&xs);
    assert!(mx.abs() < Z * sx);
    let x2: Vec<f64> = xs.iter().map(|x| x * x).collect();
    let (v, sv) = mean_and_se(&x2);
    assert!((v - 1.0).abs() < Z * sv);
    let (mu, su) = mean_and_se(&us);
    assert!(mu.abs() < Z * su, "{mu} {su}");
    let u2: Vec<f64> = us.iter().map(|u| u * u).collect();
    let (vu, svu) = mean_and_se(&u2);
    assert!((vu - 2.0).abs() < Z * svu);

    // E[log p] against quadrature of p log p.
    let lp: Vec<f64> = draws.iter().map(|&(x, y)| banana_logdensity(x, y)).collect();
    let (m, se) = mean_and_se(&lp);
    let quad = simpson(
        |x| simpson(|y| { let l = banana_logdensity(x, y); l.exp() * l }, -30.0, 10.0, 1600),
        -8.0,
        8.0,
        800,
    );
    assert!((m - quad).abs() < Z * se, "{m} vs {quad}");
}

#[test]
fn star_sampler_matches_its_construction() {
    let mut rng = seeded(2);
    let n = 200_000;
    let mut on_axis = Vec::new();
    let mut resid = Vec::new();
    let mut bins = [0usize; 10];
    let wedge = 2.0 * PI / 10.0;
    for _ in 0..n {
        let (x, y) = star_sample(&mut rng);
        let (r, th) = (x.hypot(y), y.atan2(x));
        if (10.0 * th).sin().abs() < 0.01 {
            on_axis.push(r);
        }
        resid.push(r - star_radius(th));
        let k = ((th.rem_euclid(wedge) / wedge) * 10.0) as usize;
        bins[k.min(9)] += 1;
    }
    let (m, se) = mean_and_se(&on_axis);
    assert!((m - 2.0).abs() < 3.0 * se, "on-axis radius {m} ± {se}");
    let sq: Vec<f64> = resid.iter().map(|e| e * e).collect();
    let (v, sv) = mean_and_se(&sq);
    // Delta method: SE(sd) ≈ SE(var) / (2 sd).
    assert!((v.sqrt() - 0.15).abs() < 3.0 * sv / 0.3, "sd {}", v.sqrt());
    let expect = n as f64 / 10.0;
    let chi2: f64 = bins.iter().map(|&b| (b as f64 - expect).powi(2) / expect).sum();
    assert!(chi2 < 21.67, "chi2 {chi2}");
}

#[test]
fn star_logdensity_is_roughly_normalized() {
    let mass = simpson(|x| simpson(|y| star_logdensity(x, y).exp(), -3.5, 3.6, 1400), -3.5, 3.6, 1400);
    assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
}

#[test]
fn cauchy_values_and_mass() {
    assert_relative_eq!(cauchy_logdensity(0.0), -PI.ln());
    assert_relative_eq!(cauchy_logdensity(1.0), -(2.0 * PI).ln());
    let body = 2.0
        * (simpson(|x| cauchy_logdensity(x).exp(), 0.0, 10.0, 10_000)
            + simpson(|x| cauchy_logdensity(x).exp(), 10.0, 1e4, 1_000_000));
    let tail = 2.0 * (PI / 2.0 - 1e4f64.atan()) / PI;
    assert!((body + tail - 1.0).abs() < 1e-9, "{}", body + tail);
}

#[test]
fn ergodic_drift_examples() {
    let zf = DriftConvention::ZeroFlux;
    for x in [-7.0f64, -1.0, 0.0, 0.3, 12.0] {
        let s = (1.0 + x * x).sqrt();
        let mu = ergodic_drift_1d(Target1d::Cauchy.score(x), s, x / s, zf).unwrap();
        assert!(mu.abs() < 1e-12);
        let mu1 = ergodic_drift_1d(Target1d::Cauchy.score(x), 1.0, 0.0, zf).unwrap();
        assert_relative_eq!(mu1, -x / (1.0 + x * x), epsilon = 1e-15);
        let mun = ergodic_drift_1d(Target1d::StandardNormal.score(x), 1.0, 0.0, zf).unwrap();
        assert_relative_eq!(mun, -x / 2.0);
    }
    let lit = ergodic_drift_1d(-1.0, 2.0, 0.5, DriftConvention::PaperLiteral).unwrap();
    assert_relative_eq!(lit, -4.0 + 0.25);
    assert!(ergodic_drift_1d(0.0, 0.0, 0.0, zf).is_err());
}

#[test]
fn zero_flux_drifts_are_stationary() {
    let grid: Vec<f64> = (0..=400).map(|k| -10.0 + k as f64 * 0.05).collect();
    let sigmas: [(&str, fn(f64) -> f64, fn(f64) -> f64); 3] = [
        ("one", |_| 1.0, |_| 0.0),
        ("sqrt", |x| (1.0 + x * x).sqrt(), |x| x / (1.0 + x * x).sqrt()),
        ("bump", |x| 1.0 + 0.5 * (-x * x).exp(), |x| -x * (-x * x).exp()),
    ];
    for target in [Target1d::Cauchy, Target1d::StandardNormal] {
        for (name, s, ds) in sigmas {
            let drift = |x: f64| ergodic_drift_1d(target.score(x), s(x), ds(x), DriftConvention::ZeroFlux).unwrap();
            let res = stationarity_check(drift, s, |x| target.logdensity(x), &grid, 1e-4);
            assert!(res < 1e-6, "{target:?}/{name}: {res}");
        }
    }
    let wrong = stationarity_check(|x| x, |_| 1.0, cauchy_logdensity, &grid, 1e-4);
    assert!(wrong > 1e-2);
}

#[test]
fn paper_literal_drift_is_not_stationary_for_cauchy() {
    let grid: Vec<f64> = (0..=400).map(|k| -10.0 + k as f64 * 0.05).collect();
    let s = |x: f64| (1.0 + x * x).sqrt();
    let drift = |x: f64| {
        ergodic_drift_1d(Target1d::Cauchy.score(x), s(x), x / s(x), DriftConvention::PaperLiteral).unwrap()
    };
    let res = stationarity_check(drift, s, cauchy_logdensity, &grid, 1e-4);
    assert!(res > 0.1, "paper-literal residual {res}");
}

#[test]
fn ks_distance_of_exact_quantiles_is_small() {
    let n = 1000;
    let qs: Vec<f64> = (0..n).map(|i| ((i as f64 + 0.5) / n as f64 - 0.5) * PI).map(f64::tan).collect();
    let ks = ks_distance(&qs, |x| Target1d::Cauchy.cdf(x));
    assert!(ks <= 0.5 / n as f64 + 1e-12);
    let shifted: Vec<f64> = qs.iter().map(|x| x + 3.0).collect();
    assert!(ks_distance(&shifted, |x| Target1d::Cauchy.cdf(x)) > 0.2);
    assert_relative_eq!(Target1d::StandardNormal.cdf(0.0), 0.5, epsilon = 1e-15);
    assert_relative_eq!(Target1d::StandardNormal.cdf(1.0), 0.841344746, epsilon = 1e-8);
}

#[test]
fn dataset_round_trip() {
    let data = Target2d::Banana.sample_n(5, &mut seeded(3));
    let mut buf = Vec::new();
    write_dataset(&data, &mut buf).unwrap();
    assert!(buf.starts_with(b"x_1,x_2\n"));
    assert_eq!(read_dataset(&buf[..]).unwrap(), data);
    assert!(read_dataset(&b"a,b\n1,2\n"[..]).is_err());
    assert!(read_dataset(&b"x_1,x_2\n1\n"[..]).is_err());
}

#[test]
fn banana_score_matches_finite_differences() {
    let z = Target2d::Banana.sample_n(20, &mut seeded(8));
    let h = 1e-6;
    let score = Target2d::Banana.score_rows(&z);
    for (i, r) in z.rows().into_iter().enumerate() {
        let fx = (banana_logdensity(r[0] + h, r[1]) - banana_logdensity(r[0] - h, r[1])) / (2.0 * h);
        let fy = (banana_logdensity(r[0], r[1] + h) - banana_logdensity(r[0], r[1] - h)) / (2.0 * h);
        assert_relative_eq!(score[[i, 0]], fx, epsilon = 1e-6, max_relative = 1e-6);
        assert_relative_eq!(score[[i, 1]], fy, epsilon = 1e-6, max_relative = 1e-6);
    }
    let lp = Target2d::Banana.logdensity_rows(&z);
    assert_eq!(lp[3], banana_logdensity(z[[3, 0]], z[[3, 1]]));
}

#[test]
fn star_score_points_back_to_the_ridge() {
    // Just outside the ridge at θ = 0 the radial score is negative.
    let z = ndarray::array![[star_radius(0.0) + 0.3, 0.0], [star_radius(0.0) - 0.3, 0.0]];
    let s = Target2d::Star.score_rows(&z);
    assert!(s[[0, 0]] < 0.0 && s[[1, 0]] > 0.0);
    assert_eq!(Target1d::Cauchy.score_rows(&ndarray::array![[1.0]])[[0, 0]], -1.0);
}

proptest! {
    #[test]
    fn score_var_matches_score(x in -50.0f64..50.0) {
        let tape = crate::ad::Tape::new();
        for t in [Target1d::Cauchy, Target1d::StandardNormal] {
            let v = tape.constant(ndarray::array![[x]]);
            prop_assert!((t.score_var(v).item() - t.score(x)).abs() < 1e-12);
            prop_assert!((t.logdensity_var(v).item() - t.logdensity(x)).abs() < 1e-12);
        }
    }
}
