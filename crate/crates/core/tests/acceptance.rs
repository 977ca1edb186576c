//! Acceptance criteria. Each test writes one `ACCEPTANCE k ... PASS|FAIL`
//! line straight to stdout (bypassing the harness capture) before asserting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qrnet_core::evaluation::{closed_loop_jacobian, mc_stability, simulate_closed_loop, spectral_abscissa};
use qrnet_core::experiment::{emit_report, run_experiment, Manifest, Status};
use qrnet_core::linalg::fd_jacobian;
use qrnet_core::lqr::{design_lqr, lqr_policy, solve_riccati};
use qrnet_core::models::{
    design_model, linearize, BurgersConfig, BurgersModel, LinearSystem, UavModel, UavParams,
};
use qrnet_core::ocp::dataset::DataRecord;
use qrnet_core::ocp::{generate_dataset, solve_open_loop_direct, solve_open_loop_indirect};
use qrnet_core::policies::{finalize_checkpoint, Architecture, Mlp, Scaling, SmoothSat};
use qrnet_core::training::{fit, Optimizer};
use qrnet_core::{
    ArchitectureKind, ControlBounds, ControlSystem, Dataset, EvalReport, ExperimentConfig, LqrSolution, Method,
    NeuralPolicy, OcpSettings, Policy, RunOptions, SamplingDomain, SimSettings, TrainSpec,
};

const GUARANTEED: [ArchitectureKind; 4] = [
    ArchitectureKind::LambdaJac,
    ArchitectureKind::LambdaMat,
    ArchitectureKind::UJac,
    ArchitectureKind::UMat,
];

fn verdict(k: usize, pass: bool, elapsed: f64, detail: &str) {
    let line = format!(
        "ACCEPTANCE {k:>2} {} ({elapsed:.1} s): {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "acceptance criterion {k} failed: {detail}");
}

fn burgers16() -> Arc<dyn ControlSystem> {
    Arc::new(BurgersModel::new(BurgersConfig::with_size(16)).unwrap())
}

fn uav() -> Arc<dyn ControlSystem> {
    Arc::new(UavModel::aerosonde().unwrap())
}

fn double_integrator() -> LinearSystem {
    LinearSystem::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
    )
    .unwrap()
}

fn random_net(kind: ArchitectureKind, n: usize, m: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
    let mut sizes = vec![n];
    sizes.extend_from_slice(hidden);
    sizes.push(kind.network_output_dim(n, m));
    Mlp::random(&sizes, rng).unwrap()
}

fn random_policy(
    model: &Arc<dyn ControlSystem>,
    lqr: &LqrSolution,
    kind: ArchitectureKind,
    scaling: &Scaling,
    rng: &mut ChaCha8Rng,
) -> NeuralPolicy {
    let net = random_net(kind, model.state_dim(), model.control_dim(), &[16, 16], rng);
    let ckpt = finalize_checkpoint(kind, &net, lqr, model.equilibrium(), model.bounds(), scaling).unwrap();
    NeuralPolicy::new(ckpt, kind.is_lambda().then(|| model.clone())).unwrap()
}

/// Scaling from a seeded sample of the model's sampling domain.
fn domain_scaling(model: &Arc<dyn ControlSystem>, full: &Arc<dyn ControlSystem>, domain: &SamplingDomain) -> Scaling {
    let xs: Vec<DVector<f64>> = qrnet_core::models::sample_initial_conditions(full.as_ref(), domain, 64, 1)
        .unwrap()
        .iter()
        .map(|x| full.reduce(x))
        .collect();
    Scaling::fit(xs.iter(), model.state_dim()).unwrap()
}

#[test]
fn acceptance_01_saturation_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_value = 0.0f64;
    let mut worst_slope = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..=4);
        let lo: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..0.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.1..20.0)).collect();
        let u_f: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| l + (h - l) * rng.random_range(0.1..0.9)).collect();
        let sat = SmoothSat::new(&ControlBounds::new(lo.clone(), hi.clone()).unwrap(), &u_f).unwrap();
        for i in 0..m {
            worst_value = worst_value.max((sat.apply_channel(i, u_f[i]) - u_f[i]).abs());
            let h = 1e-6 * (hi[i] - lo[i]);
            let fd = (sat.apply_channel(i, u_f[i] + h) - sat.apply_channel(i, u_f[i] - h)) / (2.0 * h);
            worst_slope = worst_slope.max((fd - 1.0).abs());
        }
    }
    let mut worst_tanh = 0.0f64;
    for a in [0.5, 1.0, 3.0] {
        let sat = SmoothSat::new(&ControlBounds::new(vec![-a], vec![a]).unwrap(), &[0.0]).unwrap();
        for k in -200..=200 {
            let u = k as f64 * 0.05;
            worst_tanh = worst_tanh.max((sat.apply_channel(0, u) - a * (u / a).tanh()).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        worst_value <= 1e-12 && worst_slope <= 1e-8 && worst_tanh <= 1e-12 && secs < 1.0,
        secs,
        &format!("|σ(u_f)−u_f| ≤ {worst_value:.1e}, |σ'(u_f)−1| ≤ {worst_slope:.1e}, |σ−a·tanh(u/a)| ≤ {worst_tanh:.1e}"),
    );
}

#[test]
fn acceptance_02_local_identities_of_guaranteed_kinds() {
    let start = Instant::now();
    let mut worst = [0.0f64; 3];
    let testbeds = [
        (burgers16(), SamplingDomain::Sphere { radius: 1.2 }),
        (uav(), SamplingDomain::Flight { scale: 1.0, h_ceil: 50.0 }),
    ];
    for (tb, (full, domain)) in testbeds.iter().enumerate() {
        let design = design_model(full);
        let lqr = design_lqr(design.as_ref()).unwrap();
        let eq = design.equilibrium().clone();
        let scaling = domain_scaling(&design, full, domain);
        let lin = linearize(design.as_ref(), &eq.x_f, &eq.u_f).unwrap();
        let a_bk = &lin.a - &lin.b * &lqr.k;
        for (ki, &kind) in GUARANTEED.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64((100 * tb + ki) as u64);
            for _ in 0..20 {
                let pol = random_policy(&design, &lqr, kind, &scaling, &mut rng);
                worst[0] = worst[0].max((pol.control(&eq.x_f) - &eq.u_f).amax());
                let fd = fd_jacobian(&eq.x_f, 1e-6, |x| pol.control(x));
                worst[1] = worst[1].max((fd + &lqr.k).amax());
                let a_cl = closed_loop_jacobian(design.as_ref(), &pol, &eq.x_f).unwrap();
                worst[2] = worst[2].max((a_cl - &a_bk).amax());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        worst[0] <= 1e-9 && worst[1] <= 1e-5 && worst[2] <= 1e-6 && secs < 30.0,
        secs,
        &format!(
            "‖û(x_f)−u_f‖∞ ≤ {:.1e}, ‖∂û/∂x(x_f)+K‖∞ (FD) ≤ {:.1e}, ‖A_cl−(A−BK)‖∞ ≤ {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    );
}

#[test]
fn acceptance_03_riccati() {
    let start = Instant::now();
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    let scalar = solve_riccati(&s(1.0), &s(1.0), &s(1.0), &s(1.0)).unwrap();
    let scalar_err = (scalar.p[(0, 0)] - (1.0 + 2f64.sqrt())).abs();
    let mut ok = scalar_err <= 1e-10;
    let mut detail = format!("scalar P error {scalar_err:.1e}");
    for (name, full) in [("burgers16", burgers16()), ("uav", uav())] {
        let design = design_model(&full);
        let sol = design_lqr(design.as_ref()).unwrap();
        let q = qrnet_core::models::cost_quadratic(design.as_ref()).unwrap().q;
        let bound = 1e-8 * (1.0 + qrnet_core::linalg::norm_inf(&q));
        let eq = design.equilibrium();
        let lin = linearize(design.as_ref(), &eq.x_f, &eq.u_f).unwrap();
        let abscissa = spectral_abscissa(&(&lin.a - &lin.b * &sol.k)).unwrap();
        ok &= sol.riccati_residual <= bound && abscissa < 0.0;
        detail += &format!(
            "; {name} (n = {}): residual {:.1e} (bound {bound:.1e}), abscissa(A−BK) {abscissa:.4}",
            design.state_dim(),
            sol.riccati_residual
        );
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(3, ok && secs < 10.0, secs, &detail);
}

#[test]
fn acceptance_04_gradient_audit() {
    let start = Instant::now();
    let full = uav();
    let design = design_model(&full);
    let lqr = design_lqr(design.as_ref()).unwrap();
    let eq = design.equilibrium().clone();
    let domain = SamplingDomain::Flight { scale: 0.3, h_ceil: 50.0 };
    let scaling = domain_scaling(&design, &full, &domain);
    let (n, m) = (design.state_dim(), design.control_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = qrnet_core::models::sample_initial_conditions(full.as_ref(), &domain, 5, 4).unwrap();
    let xs = DMatrix::from_columns(&pts.iter().map(|x| full.reduce(x)).collect::<Vec<_>>());
    let us = DMatrix::from_fn(m, 5, |i, _| eq.u_f[i] + rng.random_range(-0.1..0.1));
    let lams = DMatrix::from_fn(n, 5, |_, _| rng.random_range(-1.0..1.0));
    let mut worst = 0.0f64;
    let mut worst_kind = String::new();
    for kind in ArchitectureKind::ALL {
        let arch = Architecture::new(
            kind,
            eq.x_f.clone(),
            eq.u_f.clone(),
            design.bounds().clone(),
            lqr.p.clone(),
            lqr.k.clone(),
            scaling.clone(),
            Some(design.clone()),
        )
        .unwrap();
        let mut net = random_net(kind, n, m, &[8, 8], &mut rng);
        let (lam, w) = if kind.is_lambda() { (Some(&lams), 0.5) } else { (None, 0.0) };
        let (_, grad) = arch.loss_and_gradient(&net, &xs, &us, lam, w).unwrap();
        let theta = net.to_flat();
        let mut fd = vec![0.0; theta.len()];
        for j in 0..theta.len() {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut tp = theta.clone();
            tp[j] += h;
            net.set_flat(&tp).unwrap();
            let lp = arch.loss_and_gradient(&net, &xs, &us, lam, w).unwrap().0;
            tp[j] -= 2.0 * h;
            net.set_flat(&tp).unwrap();
            let lm = arch.loss_and_gradient(&net, &xs, &us, lam, w).unwrap().0;
            fd[j] = (lp - lm) / (2.0 * h);
        }
        net.set_flat(&theta).unwrap();
        let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let err = grad.iter().zip(&fd).fold(0.0f64, |a, (g, f)| a.max((g - f).abs())) / scale;
        if err > worst {
            worst = err;
            worst_kind = kind.name().into();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        worst <= 1e-4 && secs < 30.0,
        secs,
        &format!("eight kinds, 2×8 nets, 5 points: worst relative error {worst:.1e} ({worst_kind})"),
    );
}

#[test]
fn acceptance_05_lq_oracle() {
    let start = Instant::now();
    let model = double_integrator();
    let sol = design_lqr(&model).unwrap();
    let settings = OcpSettings::default();
    let mut worst = [0.0f64; 4];
    for x0 in [[1.0, 0.0], [-0.5, 1.5], [2.0, -1.0]] {
        let x0 = DVector::from_column_slice(&x0);
        let v = (x0.transpose() * &sol.p * &x0)[(0, 0)];
        let lam0 = &sol.p * &x0 * 2.0;
        let ind = solve_open_loop_indirect(&model, &x0, &settings).unwrap();
        let lam = &ind.lam.as_ref().unwrap()[0];
        worst[0] = worst[0].max((lam - &lam0).norm() / lam0.norm());
        worst[1] = worst[1].max((ind.cost - v).abs() / v);
        worst[2] = worst[2].max(ind.diagnostics.hamiltonian_drift);
        let dir = solve_open_loop_direct(&model, &x0, &settings).unwrap();
        worst[3] = worst[3].max((dir.cost - v).abs() / v);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        worst[0] <= 1e-3 && worst[1] <= 1e-3 && worst[2] <= 1e-5 && worst[3] <= 1e-2 && secs < 60.0,
        secs,
        &format!(
            "indirect λ(0) rel {:.1e}, cost rel {:.1e}, Hamiltonian drift {:.1e}; direct cost rel {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

// Desk-scale Burgers experiment shared by criteria 6, 7 and 11.

const BURGERS_TRIALS: usize = 10;
const BURGERS_EPOCHS: usize = 300;

fn burgers_experiment(dir: &Path) -> ExperimentConfig {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("burgers.json"), r#"{"model": "burgers", "n": 16}"#).unwrap();
    let cfg = format!(
        r#"{{
            "model": "burgers.json",
            "dataset_sizes": [16],
            "trials": {BURGERS_TRIALS},
            "architectures": ["u_jac", "u_mat"],
            "method": "indirect",
            "train_domain": {{"kind": "ball", "radius": 1.2}},
            "train": {{"epochs": {BURGERS_EPOCHS}, "batch_size": 256, "learning_rate": 1e-3}},
            "eval": {{"n_mc": 20, "domain": {{"kind": "sphere", "radius": 1.2}}}},
            "output_dir": "run",
            "seed": 2024
        }}"#
    );
    fs::write(dir.join("experiment.json"), cfg).unwrap();
    ExperimentConfig::load(&dir.join("experiment.json")).unwrap().0
}

struct BurgersRun {
    dir: PathBuf,
    secs: f64,
}

fn burgers_run() -> &'static BurgersRun {
    static RUN: OnceLock<BurgersRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = std::env::temp_dir().join(format!("qrnet-acceptance-{}", std::process::id()));
        let base = root.join("first");
        let _ = fs::remove_dir_all(&base);
        let cfg = burgers_experiment(&base);
        let start = Instant::now();
        let opts = RunOptions {
            workers: 1,
            deterministic: true,
        };
        let out = run_experiment(&cfg, &base, &opts).unwrap();
        emit_report(&out).unwrap();
        BurgersRun {
            dir: out,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn cell_reports(run: &Path) -> Vec<(String, Status, Option<EvalReport>)> {
    let manifest = Manifest::load(run).unwrap();
    manifest
        .cells
        .iter()
        .map(|c| {
            let dir = if c.size.is_some() {
                run.join("cells").join(&c.id)
            } else {
                run.join("baseline/lqr")
            };
            let eval = (c.status == Status::Ok).then(|| EvalReport::load(&dir.join("eval.json")).unwrap());
            (c.id.clone(), c.status, eval)
        })
        .collect()
}

#[test]
fn acceptance_06_burgers_local_and_mc_stability() {
    let model = burgers16();
    let eq = model.equilibrium();
    let lin = linearize(model.as_ref(), &eq.x_f, &eq.u_f).unwrap();
    let open_loop = spectral_abscissa(&lin.a).unwrap();
    let run = burgers_run();
    let cells = cell_reports(&run.dir);
    let mut stable = 0;
    let mut trained = 0;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (id, status, eval) in &cells {
        if id.starts_with("baseline") {
            continue;
        }
        trained += 1;
        let Some(e) = eval else {
            failures.push(format!("{id}: {status:?}"));
            continue;
        };
        if e.linear.as_ref().is_some_and(|l| l.abscissa < 0.0) {
            stable += 1;
        } else {
            failures.push(format!("{id}: abscissa {:?}", e.linear.as_ref().map(|l| l.abscissa)));
        }
        let w = e.stability.as_ref().and_then(|s| s.worst_case_failure).unwrap_or(f64::INFINITY);
        if w > 1e-2 {
            failures.push(format!("{id}: worst-case failure {w:.2e}"));
        }
        worst = worst.max(w);
    }
    let expected = 2 * BURGERS_TRIALS;
    verdict(
        6,
        open_loop > 0.0 && trained == expected && stable == expected && worst <= 1e-2 && run.secs <= 1200.0,
        run.secs,
        &format!(
            "open-loop abscissa {open_loop:.3}; {stable}/{expected} u_jac/u_mat policies locally stable; \
             worst MC failure {worst:.2e} over 20 runs each{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(", ")) }
        ),
    );
}

#[test]
fn acceptance_07_burgers_optimality_ordering() {
    let run = burgers_run();
    let cells = cell_reports(&run.dir);
    let median = |e: &EvalReport| e.optimality.as_ref().and_then(|o| o.quartiles.as_ref()).map(|q| q.median);
    let lqr = cells
        .iter()
        .find(|c| c.0.starts_with("baseline"))
        .and_then(|c| c.2.as_ref())
        .and_then(median);
    let best = cells
        .iter()
        .filter(|c| !c.0.starts_with("baseline"))
        .filter_map(|c| c.2.as_ref().and_then(median).map(|m| (m, c.0.clone())))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let pass = matches!((lqr, &best), (Some(l), Some((b, _))) if *b < l);
    verdict(
        7,
        pass,
        run.secs,
        &format!("median suboptimality: LQR {lqr:?} %, best trained {best:?} %"),
    );
}

#[test]
fn acceptance_08_uav_model_health() {
    let start = Instant::now();
    let model = UavModel::aerosonde().unwrap();
    let trim_residual = model.trim().residual;
    let throttle = UavParams::aerosonde().zero_thrust_throttle(20.0);
    let full: Arc<dyn ControlSystem> = Arc::new(model);
    let design = design_model(&full);
    let sol = design_lqr(design.as_ref()).unwrap();
    let pol = lqr_policy(&sol, design.equilibrium()).unwrap().saturated(design.bounds());
    let quiet = SimSettings {
        record: false,
        ..SimSettings::default()
    };
    let long = SimSettings {
        t_max: Some(60.0),
        steady_tol: 0.0,
        ..quiet.clone()
    };
    let x0 = qrnet_core::models::sample_initial_conditions(
        full.as_ref(),
        &SamplingDomain::Flight { scale: 0.2, h_ceil: 50.0 },
        1,
        8,
    )
    .unwrap()
    .remove(0);
    let sim = simulate_closed_loop(full.as_ref(), &pol, &x0, &long).unwrap();
    let drift = sim.projection_drift;
    let mc = mc_stability(
        full.as_ref(),
        &pol,
        &SamplingDomain::Flight { scale: 0.1, h_ceil: 50.0 },
        10,
        88,
        &quiet,
        1,
    )
    .unwrap();
    let worst = mc.worst_case_failure.unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        trim_residual <= 1e-8
            && (throttle - 0.390625).abs() <= 1e-12
            && drift <= 1e-6
            && sim.t_final >= 60.0 - 1e-9
            && worst <= 1e-3
            && secs < 120.0,
        secs,
        &format!(
            "trim residual {trim_residual:.1e}; zero-thrust throttle {throttle}; quaternion drift {drift:.1e} over {:.0} s; \
             LQR worst final error {worst:.1e} over 10 perturbations",
            sim.t_final
        ),
    );
}

#[test]
fn acceptance_09_uav_learning_beats_lqr() {
    let start = Instant::now();
    let full = uav();
    let design = design_model(&full);
    let lqr = design_lqr(design.as_ref()).unwrap();
    let domain = SamplingDomain::Flight { scale: 0.5, h_ceil: 50.0 };
    let data = generate_dataset(&full, &domain, 32, Method::Direct, 9, &OcpSettings::default(), 1).unwrap();
    let spec = TrainSpec {
        kind: ArchitectureKind::UMat,
        epochs: 300,
        optimizer: Optimizer::Adam,
        seed: 9,
        ..TrainSpec::default()
    };
    let (ckpt, report) = fit(&spec, &data, design.clone(), &lqr, None).unwrap();
    let pol = NeuralPolicy::new(ckpt, None).unwrap();
    let lqr_pol = lqr_policy(&lqr, design.equilibrium()).unwrap().saturated(design.bounds());
    let quiet = SimSettings {
        record: false,
        ..SimSettings::default()
    };
    let nn = mc_stability(full.as_ref(), &pol, &domain, 20, 99, &quiet, 1).unwrap();
    let base = mc_stability(full.as_ref(), &lqr_pol, &domain, 20, 99, &quiet, 1).unwrap();
    let wins = nn.runs.iter().zip(&base.runs).filter(|(a, b)| a.cost < b.cost).count();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        9,
        wins * 10 >= 20 * 6 && secs <= 1800.0,
        secs,
        &format!(
            "{}/32 trajectories converged, final loss {:.2e}; u_mat cost below LQR on {wins}/20 runs",
            data.meta.n_converged, report.final_loss
        ),
    );
}

#[test]
fn acceptance_10_approximation_capacity() {
    let start = Instant::now();
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.5]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let model: Arc<dyn ControlSystem> =
        Arc::new(LinearSystem::new(a, b, DMatrix::identity(2, 2), DMatrix::identity(1, 1)).unwrap());
    let lqr = design_lqr(model.as_ref()).unwrap();
    let k = lqr.k.clone();
    // C¹ target with the LQR value and slope at the origin.
    let target = |x: &DVector<f64>| -> f64 {
        -(k[(0, 0)] * x[0] + k[(0, 1)] * x[1]) + 0.6 * x[0] * x[0] - 0.4 * x[0] * x[1] + 0.5 * x[1] * x[1].sin()
    };
    let grid = |count: usize| -> Vec<DVector<f64>> {
        let step = 2.0 / (count - 1) as f64;
        let mut pts = Vec::new();
        for i in 0..count {
            for j in 0..count {
                pts.push(DVector::from_column_slice(&[-1.0 + i as f64 * step, -1.0 + j as f64 * step]));
            }
        }
        pts
    };
    let records: Vec<DataRecord> = grid(21)
        .into_iter()
        .enumerate()
        .map(|(i, x)| DataRecord {
            traj_id: i,
            t: 0.0,
            u: DVector::from_element(1, target(&x)),
            lam: None,
            x,
        })
        .collect();
    let data = Dataset::from_records(model.as_ref(), records).unwrap();
    let test = grid(41);
    let mut errors = Vec::new();
    for kind in GUARANTEED {
        let mut per_width = Vec::new();
        for width in [8, 32] {
            let spec = TrainSpec {
                kind,
                hidden: vec![width, width],
                optimizer: Optimizer::Lbfgs,
                lbfgs_iterations: 3000,
                lbfgs_rel_tol: 1e-12,
                seed: 10,
                ..TrainSpec::default()
            };
            let (ckpt, _) = fit(&spec, &data, model.clone(), &lqr, None).unwrap();
            let pol = NeuralPolicy::new(ckpt, kind.is_lambda().then(|| model.clone())).unwrap();
            let err = test
                .iter()
                .map(|x| (pol.control(x)[0] - target(x)).abs())
                .fold(0.0f64, f64::max);
            per_width.push(err);
        }
        errors.push((kind, per_width[0], per_width[1]));
    }
    let fits = errors.iter().all(|e| e.2 <= 5e-2);
    let improves = errors.iter().filter(|e| e.2 <= e.1).count();
    let secs = start.elapsed().as_secs_f64();
    let detail = errors
        .iter()
        .map(|(k, e8, e32)| format!("{k}: width 8 {e8:.1e}, width 32 {e32:.1e}"))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(10, fits && improves >= 3 && secs < 300.0, secs, &detail);
}

#[test]
fn acceptance_11_determinism() {
    let first = burgers_run();
    let root = first.dir.parent().unwrap().parent().unwrap().to_path_buf();
    let base = root.join("second");
    let _ = fs::remove_dir_all(&base);
    let cfg = burgers_experiment(&base);
    let start = Instant::now();
    let opts = RunOptions {
        workers: 1,
        deterministic: true,
    };
    let second = run_experiment(&cfg, &base, &opts).unwrap();
    emit_report(&second).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let a = files(&first.dir);
    let b = files(&second);
    let mut differing: Vec<String> = Vec::new();
    if a.keys().ne(b.keys()) {
        differing.push("file lists differ".into());
    }
    for (path, bytes) in &a {
        if b.get(path).is_some_and(|other| other != bytes) {
            differing.push(path.display().to_string());
        }
    }
    let _ = fs::remove_dir_all(&base);
    verdict(
        11,
        differing.is_empty() && !a.is_empty(),
        secs,
        &format!(
            "{} files compared (datasets, checkpoints, reports); {}",
            a.len(),
            if differing.is_empty() { "all byte-identical".to_string() } else { format!("differ: {}", differing.join(", ")) }
        ),
    );
}

fn files(dir: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
