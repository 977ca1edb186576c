//! Fixtures shared by the benchmarks in `benches/kernels.rs`.

use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qrnet_core::lqr::design_lqr;
use qrnet_core::models::{BurgersConfig, BurgersModel, UavModel};
use qrnet_core::policies::{finalize_checkpoint, Mlp, Scaling};
use qrnet_core::{ArchitectureKind, ControlSystem, LqrSolution, NeuralPolicy};

pub fn burgers(n: usize) -> Arc<dyn ControlSystem> {
    Arc::new(BurgersModel::new(BurgersConfig::with_size(n)).expect("default Burgers config"))
}

pub fn uav() -> Arc<dyn ControlSystem> {
    Arc::new(UavModel::aerosonde().expect("aerosonde trim"))
}

/// An untrained policy of `kind` with seeded random weights.
pub fn random_policy(
    model: &Arc<dyn ControlSystem>,
    lqr: &LqrSolution,
    kind: ArchitectureKind,
    hidden: &[usize],
    seed: u64,
) -> NeuralPolicy {
    let n = model.state_dim();
    let m = model.control_dim();
    let mut sizes = vec![n];
    sizes.extend_from_slice(hidden);
    sizes.push(kind.network_output_dim(n, m));
    let net = Mlp::random(&sizes, &mut ChaCha8Rng::seed_from_u64(seed)).expect("layer sizes");
    let ckpt = finalize_checkpoint(
        kind,
        &net,
        lqr,
        model.equilibrium(),
        model.bounds(),
        &Scaling::identity(n),
    )
    .expect("checkpoint");
    let with_model = kind.is_lambda().then(|| model.clone());
    NeuralPolicy::new(ckpt, with_model).expect("policy")
}

pub fn lqr(model: &Arc<dyn ControlSystem>) -> LqrSolution {
    design_lqr(model.as_ref()).expect("stabilizable")
}

/// A state at distance `r` from the equilibrium along a fixed direction.
pub fn offset_state(model: &dyn ControlSystem, r: f64) -> DVector<f64> {
    let x_f = &model.equilibrium().x_f;
    let d = DVector::from_fn(x_f.len(), |i, _| ((i + 1) as f64).sin());
    x_f + d.normalize() * r
}
