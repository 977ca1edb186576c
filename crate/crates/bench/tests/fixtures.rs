use qrnet_bench::{burgers, lqr, offset_state, random_policy, uav};
use qrnet_core::{ArchitectureKind, Policy};

#[test]
fn fixtures_build_and_anchor_at_the_equilibrium() {
    let model = burgers(16);
    let sol = lqr(&model);
    let pol = random_policy(&model, &sol, ArchitectureKind::UMat, &[8, 8], 3);
    let u = pol.control(&model.equilibrium().x_f);
    assert!((u - &model.equilibrium().u_f).amax() <= 1e-9);
    let x = offset_state(model.as_ref(), 1.2);
    assert!(((x - &model.equilibrium().x_f).norm() - 1.2).abs() < 1e-12);
    assert_eq!(uav().state_dim(), 13);
}
