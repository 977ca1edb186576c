use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use qrnet_bench::{burgers, lqr, offset_state, random_policy};
use qrnet_core::evaluation::{closed_loop_jacobian, simulate_closed_loop, spectral_abscissa};
use qrnet_core::lqr::{design_lqr, lqr_policy};
use qrnet_core::models::design_model;
use qrnet_core::ocp::solve_open_loop_indirect;
use qrnet_core::{ArchitectureKind, OcpSettings, Policy, SimSettings};

fn riccati(c: &mut Criterion) {
    let model = burgers(16);
    c.bench_function("lqr_burgers16", |b| b.iter(|| design_lqr(black_box(model.as_ref())).unwrap()));
    let uav = design_model(&qrnet_bench::uav());
    c.bench_function("lqr_uav_reduced", |b| b.iter(|| design_lqr(black_box(uav.as_ref())).unwrap()));
}

fn policies(c: &mut Criterion) {
    let model = burgers(16);
    let sol = lqr(&model);
    let x = offset_state(model.as_ref(), 0.8);
    for kind in [ArchitectureKind::UMat, ArchitectureKind::UJac, ArchitectureKind::LambdaMat] {
        let pol = random_policy(&model, &sol, kind, &[32; 5], 1);
        c.bench_function(&format!("control_{kind}"), |b| b.iter(|| pol.control(black_box(&x))));
        c.bench_function(&format!("jacobian_{kind}"), |b| b.iter(|| pol.jacobian(black_box(&x))));
    }
}

fn evaluation(c: &mut Criterion) {
    let model = burgers(16);
    let sol = lqr(&model);
    let pol = lqr_policy(&sol, model.equilibrium()).unwrap().saturated(model.bounds());
    let x0 = offset_state(model.as_ref(), 1.2);
    let settings = SimSettings {
        record: false,
        ..SimSettings::default()
    };
    c.bench_function("simulate_burgers16_lqr", |b| {
        b.iter(|| simulate_closed_loop(model.as_ref(), &pol, black_box(&x0), &settings).unwrap())
    });
    let a = closed_loop_jacobian(model.as_ref(), &pol, &model.equilibrium().x_f).unwrap();
    c.bench_function("spectral_abscissa_16", |b| b.iter(|| spectral_abscissa(black_box(&a)).unwrap()));
}

fn open_loop(c: &mut Criterion) {
    let model = burgers(16);
    let x0 = offset_state(model.as_ref(), 1.0);
    let settings = OcpSettings::default();
    let mut g = c.benchmark_group("ocp");
    g.sample_size(10);
    g.bench_function("indirect_burgers16", |b| {
        b.iter(|| solve_open_loop_indirect(model.as_ref(), black_box(&x0), &settings).unwrap())
    });
    g.finish();
}

criterion_group!(benches, riccati, policies, evaluation, open_loop);
criterion_main!(benches);
