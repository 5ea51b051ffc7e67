//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use snflow::dynamics::{Diffusion, Drift, SdeModel};
use snflow::nets::{Activation, MlpSpec};
use snflow::paths::BrownianApprox;
use snflow::rng::seeded;
use snflow::targets::Target2d;

/// The banana model at initialization: drift-4x64 and an off-diagonal
/// diffusion with `λ = 1`.
pub fn banana_model(seed: u64) -> SdeModel {
    let drift = MlpSpec::preset("drift-4x64", 2, Activation::Tanh).unwrap();
    let diff = MlpSpec::preset("offdiag-2x64", 2, Activation::Tanh).unwrap();
    SdeModel::init(2, 2, Drift::Net { spec: drift }, Diffusion::OffDiag { lambda: 1.0, spec: diff }, seed).unwrap()
}

pub fn banana_data(rows: usize, seed: u64) -> Array2<f64> {
    Target2d::Banana.sample_n(rows, &mut seeded(seed))
}

pub fn kl_paths(m: usize, order: usize, count: usize, seed: u64) -> Vec<BrownianApprox> {
    let mut rng = seeded(seed);
    (0..count).map(|_| BrownianApprox::sample_kl(m, order, 1.0, &mut rng).unwrap()).collect()
}
