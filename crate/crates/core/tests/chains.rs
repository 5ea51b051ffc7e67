use ndarray::{array, Array1};
use snflow::dynamics::{Diffusion, Drift, DriftConvention, ScalarMap, SdeModel};
use snflow::rng::seeded;
use snflow::solve::euler_maruyama_chain;
use snflow::targets::{ks_distance, Target1d};

fn ergodic(target: Target1d, diffusion: Diffusion) -> SdeModel {
    let drift = Drift::Ergodic {
        target,
        convention: DriftConvention::ZeroFlux,
    };
    SdeModel::new(1, 1, drift, diffusion, Array1::zeros(0)).unwrap()
}

fn median_ks(model: &SdeModel, target: Target1d, steps: usize) -> f64 {
    let mut ks: Vec<f64> = (0..5)
        .map(|seed| {
            let chain = euler_maruyama_chain(model, &array![[0.0]], 0.01, 1000, steps, &mut seeded(seed)).unwrap();
            ks_distance(chain.as_slice().unwrap(), |x| target.cdf(x))
        })
        .collect();
    ks.sort_by(f64::total_cmp);
    ks[2]
}

#[test]
fn cauchy_chains_converge_in_distribution() {
    let model = ergodic(Target1d::Cauchy, Diffusion::Diagonal { map: ScalarMap::SqrtOnePlusSquare });
    let ks: Vec<f64> = [5_000, 50_000, 500_000].iter().map(|&n| median_ks(&model, Target1d::Cauchy, n)).collect();
    assert!(ks.windows(2).all(|w| w[1] < w[0]), "{ks:?}");
    assert!(ks[2] < 0.03, "{ks:?}");
}

#[test]
fn gaussian_chains_with_unit_noise_converge() {
    let model = ergodic(Target1d::StandardNormal, Diffusion::identity(1));
    let ks: Vec<f64> = [5_000, 50_000, 500_000].iter().map(|&n| median_ks(&model, Target1d::StandardNormal, n)).collect();
    assert!(ks.windows(2).all(|w| w[1] < w[0]), "{ks:?}");
    assert!(ks[2] < 0.03, "{ks:?}");
}
