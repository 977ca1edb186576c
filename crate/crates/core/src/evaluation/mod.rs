//! Closed-loop certification: simulation, equilibria, linear stability and
//! Monte Carlo studies of stability and optimality.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::fd_jacobian;
use crate::models::{sample_initial_conditions, ControlSystem, SamplingDomain};
use crate::ocp::TrajectoryValue;
use crate::ode::{dopri5, Outcome, StepControl, Tolerances};
use crate::parallel::map_indexed;
use crate::policies::Policy;

pub use crate::lqr::spectral_abscissa;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    SteadyState,
    Timeout,
    EnvelopeAbort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    /// Final time; `None` uses the model's default.
    pub t_max: Option<f64>,
    pub rtol: f64,
    pub atol: f64,
    /// Steady state once `‖f(x, π(x))‖∞ ≤ steady_tol · (1 + ‖x‖∞)` on the
    /// rate components that vanish at equilibrium.
    pub steady_tol: f64,
    /// Keep the state and control history.
    pub record: bool,
    pub max_steps: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            t_max: None,
            rtol: 1e-6,
            atol: 1e-8,
            steady_tol: 1e-8,
            record: true,
            max_steps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Accumulated running cost at each recorded time.
    pub cost_history: Vec<f64>,
    pub cost: f64,
    pub t_final: f64,
    pub x_final: DVector<f64>,
    pub termination: Termination,
    /// `‖x(t_f) − x_f‖₂` in design coordinates.
    pub final_error: f64,
    /// Largest correction made by the state projection (quaternion norm drift).
    pub projection_drift: f64,
    pub detail: Option<String>,
}

/// Integrates the closed loop `ẋ = f(x, π(x))` from the full state `x0`
/// together with the accumulated cost. The policy sees design coordinates.
pub fn simulate_closed_loop(
    model: &dyn ControlSystem,
    policy: &dyn Policy,
    x0: &DVector<f64>,
    settings: &SimSettings,
) -> Result<SimResult> {
    let n = model.state_dim();
    check_dim("initial state", x0.len(), n)?;
    check_finite("initial state", x0.as_slice())?;
    check_dim("policy state", policy.state_dim(), model.reduced_dim())?;
    check_dim("policy control", policy.control_dim(), model.control_dim())?;
    let t_max = settings.t_max.unwrap_or_else(|| model.default_sim_horizon());
    let x_f = model.equilibrium().x_f.clone();
    let z_f = model.reduce(&x_f);
    let mask = model.equilibrium_mask();
    let control = |x: &DVector<f64>| policy.control(&model.reduce(x));

    let mut t_rec = Vec::new();
    let mut x_rec = Vec::new();
    let mut u_rec = Vec::new();
    let mut c_rec = Vec::new();
    let mut record = |t: f64, x: &DVector<f64>, c: f64| {
        if settings.record {
            t_rec.push(t);
            u_rec.push(control(x));
            x_rec.push(x.clone());
            c_rec.push(c);
        }
    };
    let mut y0 = x0.as_slice().to_vec();
    y0.push(0.0);
    let mut x_start = x0.clone();
    let mut drift = model.project_state(&mut x_start);
    y0[..n].copy_from_slice(x_start.as_slice());

    let steady = |x: &DVector<f64>| -> bool {
        let f = model.rhs(x, &control(x));
        let scale = 1.0 + x.amax();
        f.iter().zip(&mask).filter(|(_, m)| **m).all(|(v, _)| v.abs() <= settings.steady_tol * scale)
    };
    let mut termination = Termination::Timeout;
    if model.envelope_violated(&x_start) {
        termination = Termination::EnvelopeAbort;
    } else if steady(&x_start) {
        termination = Termination::SteadyState;
    }
    record(0.0, &x_start, 0.0);
    if termination != Termination::Timeout {
        let z = model.reduce(&x_start);
        return Ok(SimResult {
            t: t_rec,
            x: x_rec,
            u: u_rec,
            cost_history: c_rec,
            cost: 0.0,
            t_final: 0.0,
            final_error: (z - &z_f).norm(),
            x_final: x_start,
            termination,
            projection_drift: drift,
            detail: None,
        });
    }

    let tol = Tolerances {
        rtol: settings.rtol,
        atol: settings.atol,
        max_steps: settings.max_steps,
        ..Tolerances::default()
    };
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = DVector::from_column_slice(&y[..n]);
        let u = control(&x);
        let f = model.rhs(&x, &u);
        let l = model.cost_residual(&x, &u).norm_squared();
        if !f.iter().all(|v| v.is_finite()) || !l.is_finite() {
            return Err(Error::NonFinite(format!("closed-loop rate at t = {t}")));
        }
        dy[..n].copy_from_slice(f.as_slice());
        dy[n] = l;
        Ok(())
    };
    let observe = |t: f64, y: &mut [f64]| -> StepControl {
        let mut x = DVector::from_column_slice(&y[..n]);
        drift = drift.max(model.project_state(&mut x));
        y[..n].copy_from_slice(x.as_slice());
        record(t, &x, y[n]);
        if model.envelope_violated(&x) {
            termination = Termination::EnvelopeAbort;
            return StepControl::Stop;
        }
        if steady(&x) {
            termination = Termination::SteadyState;
            return StepControl::Stop;
        }
        StepControl::Continue
    };
    let (t_end, y_end, detail) = match dopri5(rhs, 0.0, &y0, t_max, &tol, observe) {
        Ok((t, y, outcome, _)) => {
            if outcome == Outcome::Finished && termination == Termination::Timeout {
                termination = Termination::Timeout;
            }
            (t, y, None)
        }
        Err(e) if e.is_numerical() => {
            termination = Termination::EnvelopeAbort;
            let (t, y) = match (t_rec.last(), x_rec.last(), c_rec.last()) {
                (Some(t), Some(x), Some(c)) => {
                    let mut y = x.as_slice().to_vec();
                    y.push(*c);
                    (*t, y)
                }
                _ => (0.0, y0.clone()),
            };
            (t, y, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    let x_final = DVector::from_column_slice(&y_end[..n]);
    let final_error = (model.reduce(&x_final) - &z_f).norm();
    Ok(SimResult {
        t: t_rec,
        x: x_rec,
        u: u_rec,
        cost_history: c_rec,
        cost: y_end[n],
        t_final: t_end,
        x_final,
        termination,
        final_error,
        projection_drift: drift,
        detail,
    })
}

/// `∂f/∂x + ∂f/∂u · ∂π/∂x` at `(x, π(x))` (design coordinates).
pub fn closed_loop_jacobian(model: &dyn ControlSystem, policy: &dyn Policy, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dim("state", x.len(), model.state_dim())?;
    check_dim("policy state", policy.state_dim(), model.state_dim())?;
    let u = policy.control(x);
    Ok(model.state_jacobian(x, &u) + model.control_jacobian(x, &u) * policy.jacobian(x))
}

/// Central-difference version of [`closed_loop_jacobian`], for cross-checks.
pub fn closed_loop_jacobian_fd(model: &dyn ControlSystem, policy: &dyn Policy, x: &DVector<f64>) -> DMatrix<f64> {
    fd_jacobian(x, 1e-6, |y| model.rhs(y, &policy.control(y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopEquilibrium {
    pub x: Vec<f64>,
    /// `‖x̄ − x_f‖₂`.
    pub offset: f64,
    /// `‖f(x̄, π(x̄))‖∞`.
    pub residual: f64,
    pub iterations: usize,
}

/// Damped Newton on `g(x) = f(x, π(x))` from `x_guess` (design coordinates).
pub fn find_closed_loop_equilibrium(
    model: &dyn ControlSystem,
    policy: &dyn Policy,
    x_guess: &DVector<f64>,
) -> Result<ClosedLoopEquilibrium> {
    check_dim("guess", x_guess.len(), model.state_dim())?;
    check_finite("guess", x_guess.as_slice())?;
    let g = |x: &DVector<f64>| model.rhs(x, &policy.control(x));
    let done = |x: &DVector<f64>, r: &DVector<f64>| r.amax() <= 1e-10 * (1.0 + x.amax());
    let mut x = x_guess.clone();
    let mut r = g(&x);
    for it in 0..100 {
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("closed-loop rate during equilibrium search".into()));
        }
        if done(&x, &r) {
            return Ok(equilibrium_result(model, x, &r, it));
        }
        let jac = closed_loop_jacobian(model, policy, &x)?;
        let step = match jac.clone().lu().solve(&(-&r)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => jac
                .svd(true, true)
                .solve(&(-&r), 1e-14)
                .map_err(|e| Error::NonConvergence(format!("singular closed-loop Jacobian: {e}")))?,
        };
        let norm = r.norm();
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial = &x + &step * alpha;
            let rt = g(&trial);
            if rt.iter().all(|v| v.is_finite()) && rt.norm() < (1.0 - 1e-4 * alpha) * norm {
                x = trial;
                r = rt;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            return Err(Error::NonConvergence(format!(
                "equilibrium search stalled with residual {:e}",
                r.amax()
            )));
        }
    }
    if done(&x, &r) {
        return Ok(equilibrium_result(model, x, &r, 100));
    }
    Err(Error::NonConvergence(format!(
        "equilibrium search did not converge in 100 iterations (residual {:e})",
        r.amax()
    )))
}

fn equilibrium_result(model: &dyn ControlSystem, x: DVector<f64>, r: &DVector<f64>, iterations: usize) -> ClosedLoopEquilibrium {
    ClosedLoopEquilibrium {
        offset: (&x - &model.equilibrium().x_f).norm(),
        residual: r.amax(),
        x: x.as_slice().to_vec(),
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStability {
    /// `None` when the equilibrium search failed; the abscissa is then taken at `x_f`.
    pub equilibrium: Option<ClosedLoopEquilibrium>,
    pub equilibrium_error: Option<String>,
    pub abscissa: f64,
    /// Abscissa at `x_f` itself.
    pub abscissa_at_target: f64,
}

/// Locates the closed-loop equilibrium near `x_f` and the spectral abscissa
/// of the closed-loop Jacobian there.
pub fn linear_stability(model: &dyn ControlSystem, policy: &dyn Policy) -> Result<LinearStability> {
    let x_f = model.equilibrium().x_f.clone();
    let at_target = spectral_abscissa(&closed_loop_jacobian(model, policy, &x_f)?)?;
    match find_closed_loop_equilibrium(model, policy, &x_f) {
        Ok(eq) => {
            let x = DVector::from_column_slice(&eq.x);
            let abscissa = spectral_abscissa(&closed_loop_jacobian(model, policy, &x)?)?;
            Ok(LinearStability {
                equilibrium: Some(eq),
                equilibrium_error: None,
                abscissa,
                abscissa_at_target: at_target,
            })
        }
        Err(e) if e.is_numerical() => Ok(LinearStability {
            equilibrium: None,
            equilibrium_error: Some(e.to_string()),
            abscissa: at_target,
            abscissa_at_target: at_target,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub x0: Vec<f64>,
    pub termination: Termination,
    pub final_error: f64,
    pub cost: f64,
    pub t_final: f64,
    pub detail: Option<String>,
}

impl RunRecord {
    fn from_sim(index: usize, x0: &DVector<f64>, sim: Result<SimResult>) -> Self {
        match sim {
            Ok(s) => Self {
                index,
                x0: x0.as_slice().to_vec(),
                termination: s.termination,
                final_error: s.final_error,
                cost: s.cost,
                t_final: s.t_final,
                detail: s.detail,
            },
            Err(e) => Self {
                index,
                x0: x0.as_slice().to_vec(),
                termination: Termination::EnvelopeAbort,
                final_error: f64::INFINITY,
                cost: f64::INFINITY,
                t_final: 0.0,
                detail: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStability {
    pub seed: u64,
    pub runs: Vec<RunRecord>,
    /// Largest final error over the runs; `None` for an empty study.
    pub worst_case_failure: Option<f64>,
}

impl McStability {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["index", "termination", "final_error", "cost", "t_final"])
            .map_err(csv_err)?;
        for r in &self.runs {
            w.write_record([
                r.index.to_string(),
                termination_name(r.termination).into(),
                fmt(r.final_error),
                fmt(r.cost),
                fmt(r.t_final),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulates `count` seeded initial conditions and records the worst final error.
pub fn mc_stability(
    model: &dyn ControlSystem,
    policy: &dyn Policy,
    domain: &SamplingDomain,
    count: usize,
    seed: u64,
    settings: &SimSettings,
    workers: usize,
) -> Result<McStability> {
    let x0s = sample_initial_conditions(model, domain, count, seed)?;
    let quiet = SimSettings {
        record: false,
        ..settings.clone()
    };
    let runs = map_indexed(count, workers, |i| {
        RunRecord::from_sim(i, &x0s[i], simulate_closed_loop(model, policy, &x0s[i], &quiet))
    });
    let worst = runs.iter().map(|r| r.final_error).reduce(f64::max);
    Ok(McStability {
        seed,
        runs,
        worst_case_failure: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityRun {
    pub traj_id: usize,
    pub value: f64,
    pub cost: f64,
    pub termination: Termination,
    pub suboptimality_pct: Option<f64>,
    /// Why the run is not part of the statistics.
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOptimality {
    pub runs: Vec<OptimalityRun>,
    pub included: usize,
    /// Runs that did not reach steady state.
    pub failed: usize,
    /// Runs with a non-positive reference value.
    pub invalid_reference: usize,
    pub quartiles: Option<Quartiles>,
}

impl McOptimality {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["traj_id", "V", "J", "termination", "suboptimality_pct", "excluded"])
            .map_err(csv_err)?;
        for r in &self.runs {
            w.write_record([
                r.traj_id.to_string(),
                fmt(r.value),
                fmt(r.cost),
                termination_name(r.termination).into(),
                r.suboptimality_pct.map(fmt).unwrap_or_default(),
                r.excluded.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A timed-out run still counts as converged for optimality once its final
/// error is below this fraction of the initial offset. On stiff models the
/// integrator noise floor can keep the rate test from ever firing.
pub const SETTLED_FRACTION: f64 = 1e-6;

/// Closed-loop cost against the optimal value from each recorded initial
/// condition: `100 (J − V) / V`.
pub fn mc_optimality(
    model: &dyn ControlSystem,
    policy: &dyn Policy,
    values: &[TrajectoryValue],
    settings: &SimSettings,
    workers: usize,
) -> Result<McOptimality> {
    let quiet = SimSettings {
        record: false,
        ..settings.clone()
    };
    let z_f = model.reduce(&model.equilibrium().x_f);
    let runs = map_indexed(values.len(), workers, |i| {
        let v = &values[i];
        let sim = simulate_closed_loop(model, policy, &v.x0, &quiet);
        let offset = (model.reduce(&v.x0) - &z_f).norm();
        let (cost, termination, settled, detail) = match sim {
            Ok(s) => {
                let settled = s.termination == Termination::SteadyState
                    || (s.termination == Termination::Timeout && s.final_error <= SETTLED_FRACTION * offset);
                (s.cost, s.termination, settled, s.detail)
            }
            Err(e) => (f64::INFINITY, Termination::EnvelopeAbort, false, Some(e.to_string())),
        };
        let (pct, excluded) = if !(v.value > 0.0) {
            (None, Some(format!("reference value {} is not positive", v.value)))
        } else if !settled {
            let why = detail.unwrap_or_else(|| termination_name(termination).to_string());
            (None, Some(format!("not converged: {why}")))
        } else {
            (Some(100.0 * (cost - v.value) / v.value), None)
        };
        OptimalityRun {
            traj_id: v.traj_id,
            value: v.value,
            cost,
            termination,
            suboptimality_pct: pct,
            excluded,
        }
    });
    let mut pcts: Vec<f64> = runs.iter().filter_map(|r| r.suboptimality_pct).collect();
    pcts.sort_by(f64::total_cmp);
    let invalid = runs.iter().filter(|r| !(r.value > 0.0)).count();
    let failed = runs.iter().filter(|r| r.value > 0.0 && r.excluded.is_some()).count();
    Ok(McOptimality {
        included: pcts.len(),
        failed,
        invalid_reference: invalid,
        quartiles: quartiles(&pcts),
        runs,
    })
}

/// What [`evaluate_policy`] runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub linear: bool,
    /// Monte Carlo runs; 0 skips the stability study.
    pub n_mc: usize,
    pub domain: SamplingDomain,
    pub sim: SimSettings,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            linear: true,
            n_mc: 100,
            domain: SamplingDomain::Sphere { radius: 1.2 },
            sim: SimSettings {
                record: false,
                ..SimSettings::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub n: usize,
    pub seed: u64,
    pub worst_case_failure: Option<f64>,
    pub steady_state: usize,
    pub timeout: usize,
    pub envelope_abort: usize,
}

impl StabilitySummary {
    pub fn of(mc: &McStability) -> Self {
        let count = |t| mc.runs.iter().filter(|r| r.termination == t).count();
        Self {
            n: mc.runs.len(),
            seed: mc.seed,
            worst_case_failure: mc.worst_case_failure,
            steady_state: count(Termination::SteadyState),
            timeout: count(Termination::Timeout),
            envelope_abort: count(Termination::EnvelopeAbort),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalitySummary {
    pub included: usize,
    pub failed: usize,
    pub invalid_reference: usize,
    pub quartiles: Option<Quartiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub linear: Option<LinearStability>,
    pub stability: Option<StabilitySummary>,
    pub optimality: Option<OptimalitySummary>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Runs the linear and Monte Carlo studies for one policy. `design` is the
/// policy's coordinate model, `full` the simulated one. Per-run tables go to
/// `stability.csv` and `optimality.csv` under `out` when given.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    name: &str,
    full: &dyn ControlSystem,
    design: &dyn ControlSystem,
    policy: &dyn Policy,
    spec: &EvalSpec,
    mc_seed: u64,
    values: Option<&[TrajectoryValue]>,
    workers: usize,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let linear = if spec.linear { Some(linear_stability(design, policy)?) } else { None };
    let stability = if spec.n_mc > 0 {
        let mc = mc_stability(full, policy, &spec.domain, spec.n_mc, mc_seed, &spec.sim, workers)?;
        if let Some(dir) = out {
            mc.write_csv(&dir.join("stability.csv"))?;
        }
        Some(StabilitySummary::of(&mc))
    } else {
        None
    };
    let optimality = match values {
        Some(v) => {
            let o = mc_optimality(full, policy, v, &spec.sim, workers)?;
            if let Some(dir) = out {
                o.write_csv(&dir.join("optimality.csv"))?;
            }
            Some(OptimalitySummary {
                included: o.included,
                failed: o.failed,
                invalid_reference: o.invalid_reference,
                quartiles: o.quartiles,
            })
        }
        None => None,
    };
    Ok(EvalReport {
        policy: name.to_string(),
        linear,
        stability,
        optimality,
    })
}

/// Linear-interpolation quantile of sorted data (`p ∈ [0, 1]`).
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn quartiles(sorted: &[f64]) -> Option<Quartiles> {
    Some(Quartiles {
        q1: quantile(sorted, 0.25)?,
        median: quantile(sorted, 0.5)?,
        q3: quantile(sorted, 0.75)?,
    })
}

pub fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::SteadyState => "steady_state",
        Termination::Timeout => "timeout",
        Termination::EnvelopeAbort => "envelope_abort",
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::{design_lqr, lqr_policy, LqrPolicy};
    use crate::models::linear::LinearSystem;
    use crate::models::uav::UavModel;

    fn double_integrator() -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn lqr_for(model: &dyn ControlSystem) -> LqrPolicy {
        lqr_policy(&design_lqr(model).unwrap(), model.equilibrium()).unwrap()
    }

    #[test]
    fn lqr_cost_matches_riccati_value() {
        let model = double_integrator();
        let pol = lqr_for(&model);
        let x0 = DVector::from_column_slice(&[1.0, -0.5]);
        let sim = simulate_closed_loop(&model, &pol, &x0, &SimSettings::default()).unwrap();
        let v = pol.value(&x0);
        assert!((sim.cost - v).abs() <= 1e-3 * v, "{} vs {v}", sim.cost);
        assert!(sim.final_error <= 1e-6, "{}", sim.final_error);
        assert_eq!(sim.termination, Termination::SteadyState);
        assert_eq!(sim.t.len(), sim.x.len());
        assert!(sim.cost_history.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn closed_loop_jacobian_of_lqr_is_a_minus_bk() {
        let model = double_integrator();
        let sol = design_lqr(&model).unwrap();
        let pol = lqr_policy(&sol, model.equilibrium()).unwrap();
        let x = DVector::from_column_slice(&[0.3, 0.7]);
        let j = closed_loop_jacobian(&model, &pol, &x).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!((j - (a - b * &sol.k)).amax() < 1e-14);
    }

    #[test]
    fn closed_loop_jacobian_matches_finite_differences() {
        let model = UavModel::aerosonde().unwrap();
        let design = crate::models::Reduced::new(std::sync::Arc::new(model));
        let pol = lqr_for(&design).saturated(design.bounds());
        let mut x = design.equilibrium().x_f.clone();
        x[1] += 0.5;
        x[4] += 0.02;
        let j = closed_loop_jacobian(&design, &pol, &x).unwrap();
        let fd = closed_loop_jacobian_fd(&design, &pol, &x);
        assert!((&j - &fd).amax() <= 1e-5 * (1.0 + j.amax()), "{}", (&j - &fd).amax());
    }

    #[test]
    fn scalar_unstable_plant_abscissa() {
        let model = LinearSystem::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let pol = lqr_for(&model);
        let ls = linear_stability(&model, &pol).unwrap();
        assert!((ls.abscissa + 2f64.sqrt()).abs() < 1e-10);
        let eq = ls.equilibrium.unwrap();
        assert!(eq.offset < 1e-12 && eq.residual <= 1e-10);
    }

    #[test]
    fn spectral_abscissa_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        assert!((spectral_abscissa(&d).unwrap() + 1.0).abs() < 1e-12);
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, -3.0, 0.0]);
        assert!(spectral_abscissa(&skew).unwrap().abs() < 1e-12);
        // (s − 2)(s + 1)(s + 3) = s³ + 2s² − 5s − 6.
        let comp = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 6.0, 5.0, -2.0]);
        assert!((spectral_abscissa(&comp).unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn equilibrium_search_finds_offset_equilibrium() {
        // π(x) = −K x + 0.1 shifts the closed-loop equilibrium.
        struct Shifted(LqrPolicy);
        impl Policy for Shifted {
            fn state_dim(&self) -> usize {
                self.0.state_dim()
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn control(&self, x: &DVector<f64>) -> DVector<f64> {
                self.0.control(x).add_scalar(0.1)
            }
            fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
                self.0.jacobian(x)
            }
        }
        let model = double_integrator();
        let pol = Shifted(lqr_for(&model));
        let eq = find_closed_loop_equilibrium(&model, &pol, &DVector::zeros(2)).unwrap();
        let r = model.rhs(&DVector::from_column_slice(&eq.x), &pol.control(&DVector::from_column_slice(&eq.x)));
        assert!(r.amax() <= 1e-10);
        // K = [1, √3]: x₁ = 0.1 / k₁.
        assert!((eq.x[0] - 0.1).abs() < 1e-9 && eq.x[1].abs() < 1e-12, "{:?}", eq.x);
        assert!((eq.offset - 0.1).abs() < 1e-9);
    }

    #[test]
    fn leaving_the_envelope_aborts() {
        let model = UavModel::aerosonde().unwrap();
        struct Dive;
        impl Policy for Dive {
            fn state_dim(&self) -> usize {
                10
            }
            fn control_dim(&self) -> usize {
                4
            }
            fn control(&self, _x: &DVector<f64>) -> DVector<f64> {
                DVector::from_column_slice(&[0.0, -0.4, 0.0, 0.0])
            }
            fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::zeros(4, 10)
            }
        }
        let mut x0 = model.equilibrium().x_f.clone();
        x0[2] += 290.0;
        let settings = SimSettings {
            record: false,
            ..SimSettings::default()
        };
        let sim = simulate_closed_loop(&model, &Dive, &x0, &settings).unwrap();
        assert_eq!(sim.termination, Termination::EnvelopeAbort, "{sim:?}");
        assert!(sim.t_final < model.default_sim_horizon());
        assert!(sim.projection_drift < 1e-6);
    }

    #[test]
    fn empty_studies() {
        let model = double_integrator();
        let pol = lqr_for(&model);
        let s = mc_stability(&model, &pol, &SamplingDomain::Sphere { radius: 1.0 }, 0, 1, &SimSettings::default(), 2)
            .unwrap();
        assert!(s.runs.is_empty() && s.worst_case_failure.is_none());
        let o = mc_optimality(&model, &pol, &[], &SimSettings::default(), 2).unwrap();
        assert_eq!(o.included, 0);
        assert!(o.quartiles.is_none());
    }

    #[test]
    fn lqr_is_optimal_for_its_own_problem() {
        let model = double_integrator();
        let pol = lqr_for(&model);
        let x0s = sample_initial_conditions(&model, &SamplingDomain::Ball { radius: 2.0 }, 12, 5).unwrap();
        let mut values: Vec<TrajectoryValue> = x0s
            .iter()
            .enumerate()
            .map(|(i, x0)| TrajectoryValue {
                traj_id: i,
                value: pol.value(x0),
                x0: x0.clone(),
            })
            .collect();
        values.push(TrajectoryValue {
            traj_id: 99,
            x0: DVector::zeros(2),
            value: 0.0,
        });
        let o = mc_optimality(&model, &pol, &values, &SimSettings::default(), 3).unwrap();
        assert_eq!(o.included, 12);
        assert_eq!(o.invalid_reference, 1);
        let q = o.quartiles.unwrap();
        assert!(q.median.abs() < 0.5 && q.q1.abs() < 0.5 && q.q3.abs() < 0.5, "{q:?}");
        let s = mc_stability(&model, &pol, &SamplingDomain::Ball { radius: 2.0 }, 12, 5, &SimSettings::default(), 3)
            .unwrap();
        assert!(s.worst_case_failure.unwrap() <= 1e-6);
        let s1 = mc_stability(&model, &pol, &SamplingDomain::Ball { radius: 2.0 }, 12, 5, &SimSettings::default(), 1)
            .unwrap();
        assert_eq!(s, s1);
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.25), Some(3.25));
        assert_eq!(quantile(&v, 0.5), Some(5.5));
        assert_eq!(quantile(&v, 1.0), Some(10.0));
        assert_eq!(quantile(&[4.0], 0.75), Some(4.0));
        assert_eq!(quantile(&[], 0.5), None);
    }
}
