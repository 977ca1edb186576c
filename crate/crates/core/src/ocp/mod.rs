//! Open-loop optimal control: the Pontryagin boundary value problem, a direct
//! transcription, and supervision datasets built from their solutions.

pub mod dataset;
pub mod direct;
pub mod indirect;
mod mesh;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::{fd_jacobian, invert, norm_inf};
use crate::lqr::LqrSolution;
use crate::models::{cost_quadratic, linearize, ControlSystem};

pub use dataset::{generate_dataset, DataRecord, Dataset, DatasetMeta, Discarded, TrajectoryValue};
pub use direct::solve_open_loop_direct;
pub use indirect::solve_open_loop_indirect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Indirect,
    Direct,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Indirect => "indirect",
            Method::Direct => "direct",
        })
    }
}

/// Horizon continuation, mesh and solver settings shared by both methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpSettings {
    /// Initial horizon; `None` uses the model's default.
    pub horizon: Option<f64>,
    pub growth: f64,
    /// Largest horizon is `growth^max_extensions · horizon`.
    pub max_extensions: u32,
    pub nodes: usize,
    pub max_nodes: usize,
    /// Convergence threshold on the collocation defects (∞-norm).
    pub defect_tol: f64,
    pub max_newton_iterations: usize,
    pub max_halvings: usize,
    /// Accept a horizon once `‖x(T) − x_f‖ ≤ terminal_tol · ‖x₀ − x_f‖`.
    pub terminal_tol: f64,
    /// ... and the cost changed by less than this fraction since the previous horizon.
    pub cost_change_tol: f64,
    /// Indirect method: allowed drift of the Hamiltonian, relative to `1 + |H(0)|`.
    pub hamiltonian_tol: f64,
    /// Direct method: defect threshold (∞-norm) for accepting a transcription.
    pub direct_defect_tol: f64,
    /// Direct method: outer augmented-Lagrangian iterations.
    pub max_outer_iterations: usize,
    /// Direct method: inner iterations per outer iteration.
    pub max_inner_iterations: usize,
}

impl Default for OcpSettings {
    fn default() -> Self {
        Self {
            horizon: None,
            growth: 2.0,
            max_extensions: 10,
            nodes: 60,
            max_nodes: 480,
            defect_tol: 1e-9,
            max_newton_iterations: 60,
            max_halvings: 30,
            terminal_tol: 1e-3,
            cost_change_tol: 1e-3,
            hamiltonian_tol: 1e-5,
            direct_defect_tol: 1e-7,
            max_outer_iterations: 40,
            max_inner_iterations: 200,
        }
    }
}

impl OcpSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon.is_none_or(|t| t > 0.0 && t.is_finite())
            && self.growth > 1.0
            && self.nodes >= 3
            && self.max_nodes >= self.nodes
            && self.defect_tol > 0.0
            && self.direct_defect_tol > 0.0
            && self.terminal_tol > 0.0
            && self.cost_change_tol > 0.0
            && self.hamiltonian_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid open-loop solver settings {self:?}")))
        }
    }

    pub fn initial_horizon(&self, model: &dyn ControlSystem) -> f64 {
        self.horizon.unwrap_or_else(|| model.default_horizon())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Largest collocation defect at the accepted solution.
    pub defect: f64,
    /// `max |H(t) − H(0)|` (indirect only).
    pub hamiltonian_drift: f64,
    /// `max |H(t)|` (indirect only).
    pub hamiltonian_max: f64,
    /// `‖∂H/∂u‖∞` over unclipped nodes (indirect only).
    pub stationarity: f64,
    pub horizon: f64,
    pub nodes: usize,
    pub horizons_tried: usize,
    pub iterations: usize,
    pub terminal_error: f64,
    pub cost_change: f64,
}

/// A (locally) optimal open-loop trajectory on its collocation mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremalTrajectory {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub lam: Option<Vec<DVector<f64>>>,
    pub u: Vec<DVector<f64>>,
    pub cost: f64,
    pub converged: bool,
    pub diagnostics: Diagnostics,
}

impl ExtremalTrajectory {
    /// The trivial solution from the equilibrium.
    fn at_rest(model: &dyn ControlSystem, horizon: f64, nodes: usize, with_costate: bool) -> Self {
        let eq = model.equilibrium();
        let t = mesh::graded(horizon, horizon, nodes);
        let n = model.state_dim();
        Self {
            x: vec![eq.x_f.clone(); t.len()],
            lam: with_costate.then(|| vec![DVector::zeros(n); t.len()]),
            u: vec![eq.u_f.clone(); t.len()],
            cost: 0.0,
            converged: true,
            diagnostics: Diagnostics {
                horizon,
                nodes: t.len(),
                ..Diagnostics::default()
            },
            t,
        }
    }
}

/// `H(x, λ, u) = L(x, u) + λᵀ f(x, u)`.
pub fn hamiltonian(model: &dyn ControlSystem, x: &DVector<f64>, lam: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    check_dim("costate", lam.len(), model.state_dim())?;
    let l = crate::models::running_cost(model, x, u)?;
    let f = crate::models::dynamics_rhs(model, x, u)?;
    Ok(l + lam.dot(&f))
}

/// Pointwise minimizer of the Hamiltonian over the control box.
pub fn minimize_hamiltonian(model: &dyn ControlSystem, x: &DVector<f64>, lam: &DVector<f64>) -> Result<DVector<f64>> {
    crate::policies::control_from_value_gradient(model, x, lam)
}

/// State and costate rates of the characteristic system, with `u` minimizing `H`.
pub fn pmp_rhs(model: &dyn ControlSystem, x: &DVector<f64>, lam: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let pmp = Pmp::new(model)?;
    check_dim("state", x.len(), pmp.n)?;
    check_dim("costate", lam.len(), pmp.n)?;
    check_finite("state", x.as_slice())?;
    check_finite("costate", lam.as_slice())?;
    let (xd, ld) = pmp.rates(x, lam);
    check_finite("characteristic rates", xd.as_slice())?;
    Ok((xd, ld))
}

/// Precomputed pieces of the characteristic system.
pub(crate) struct Pmp<'a> {
    pub model: &'a dyn ControlSystem,
    pub n: usize,
    half_r_inv: DMatrix<f64>,
    b_const: Option<DMatrix<f64>>,
}

impl<'a> Pmp<'a> {
    pub fn new(model: &'a dyn ControlSystem) -> Result<Self> {
        let r = cost_quadratic(model)?.r;
        let half_r_inv = invert(&r, "R")? * 0.5;
        let eq = model.equilibrium();
        let b_const = model.constant_control_matrix().then(|| model.control_matrix(&eq.x_f));
        Ok(Self {
            model,
            n: model.state_dim(),
            half_r_inv,
            b_const,
        })
    }

    fn control_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.b_const {
            Some(b) => b.clone(),
            None => self.model.control_matrix(x),
        }
    }

    /// Unclipped minimizer and its clipped value.
    pub fn control_raw(&self, x: &DVector<f64>, lam: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let b = self.control_matrix(x);
        let v = &self.model.equilibrium().u_f - &self.half_r_inv * (b.transpose() * lam);
        let mut u = v.clone();
        self.model.bounds().clip(u.as_mut_slice());
        (v, u)
    }

    pub fn control(&self, x: &DVector<f64>, lam: &DVector<f64>) -> DVector<f64> {
        self.control_raw(x, lam).1
    }

    pub fn rates(&self, x: &DVector<f64>, lam: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let u = self.control(x, lam);
        let xd = self.model.rhs(x, &u);
        let a = self.model.state_jacobian(x, &u);
        let ld = -self.model.cost_state_gradient(x, &u) - a.transpose() * lam;
        (xd, ld)
    }

    /// Stacked rate of `y = (x, λ)`.
    pub fn field(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let x = y.rows(0, n).clone_owned();
        let lam = y.rows(n, n).clone_owned();
        let (xd, ld) = self.rates(&x, &lam);
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&xd);
        out.rows_mut(n, n).copy_from(&ld);
        out
    }

    /// Forward-difference Jacobian of `field`, reusing `f0 = field(y)`.
    pub fn field_jacobian(&self, y: &DVector<f64>, f0: &DVector<f64>) -> DMatrix<f64> {
        let d = y.len();
        let mut j = DMatrix::zeros(d, d);
        let mut yp = y.clone();
        for c in 0..d {
            let h = 1e-7 * y[c].abs().max(1.0);
            yp[c] = y[c] + h;
            let fp = self.field(&yp);
            yp[c] = y[c];
            j.set_column(c, &((fp - f0) / h));
        }
        j
    }

    pub fn hamiltonian(&self, x: &DVector<f64>, lam: &DVector<f64>) -> f64 {
        let u = self.control(x, lam);
        self.model.cost_residual(x, &u).norm_squared() + lam.dot(&self.model.rhs(x, &u))
    }

    /// `‖∂H/∂u‖∞` over unclipped channels at the minimizing control.
    pub fn stationarity(&self, x: &DVector<f64>, lam: &DVector<f64>) -> f64 {
        let (v, u) = self.control_raw(x, lam);
        let (_, ju) = self.model.cost_residual_jacobians(x, &u);
        let r = self.model.cost_residual(x, &u);
        let g = ju.transpose() * r * 2.0 + self.control_matrix(x).transpose() * lam;
        let bounds = self.model.bounds();
        let mask = bounds.clip_mask(v.as_slice());
        g.iter().zip(mask).filter(|(_, m)| *m > 0.0).fold(0.0, |a, (gi, _)| a.max(gi.abs()))
    }
}

/// Saturated LQR rollout on the mesh `t` (RK4 with sub-steps), used as the
/// initial guess of both solvers. Sub-steps are sized from the closed-loop
/// linearization so stiff models stay inside the RK4 stability region.
pub(crate) fn lqr_rollout(
    model: &dyn ControlSystem,
    lqr: &LqrSolution,
    x0: &DVector<f64>,
    t: &[f64],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let eq = model.equilibrium();
    let bounds = model.bounds();
    let policy = |x: &DVector<f64>| {
        let mut u = &eq.u_f - &lqr.k * (x - &eq.x_f);
        bounds.clip(u.as_mut_slice());
        u
    };
    let rhs = |x: &DVector<f64>| model.rhs(x, &policy(x));
    let stiffness = linearize(model, &eq.x_f, &eq.u_f)
        .map(|l| norm_inf(&(l.a - l.b * &lqr.k)))
        .unwrap_or(0.0);
    let dev0 = (x0 - &eq.x_f).amax();
    let mut xs = Vec::with_capacity(t.len());
    let mut x = x0.clone();
    xs.push(x.clone());
    let mut diverged = false;
    'outer: for w in t.windows(2) {
        let steps = ((w[1] - w[0]) * stiffness / 2.0).ceil().clamp(4.0, 1e5) as usize;
        let h = (w[1] - w[0]) / steps as f64;
        for _ in 0..steps {
            let k1 = rhs(&x);
            let k2 = rhs(&(&x + &k1 * (0.5 * h)));
            let k3 = rhs(&(&x + &k2 * (0.5 * h)));
            let k4 = rhs(&(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if !x.iter().all(|v| v.is_finite()) || (&x - &eq.x_f).amax() > 10.0 * dev0 {
                diverged = true;
                break 'outer;
            }
        }
        xs.push(x.clone());
    }
    if diverged {
        // The linear feedback cannot hold the state: straight line to x_f instead.
        let span = t[t.len() - 1] - t[0];
        xs = t
            .iter()
            .map(|s| &eq.x_f + (x0 - &eq.x_f) * (1.0 - (s - t[0]) / span))
            .collect();
    }
    let us = xs.iter().map(policy).collect();
    (xs, us)
}

/// Linear interpolation of node values onto new times (constant extrapolation).
pub(crate) fn interpolate(t: &[f64], v: &[DVector<f64>], at: f64) -> DVector<f64> {
    if at <= t[0] {
        return v[0].clone();
    }
    let last = t.len() - 1;
    if at >= t[last] {
        return v[last].clone();
    }
    let k = t.partition_point(|s| *s <= at) - 1;
    let w = (at - t[k]) / (t[k + 1] - t[k]);
    &v[k] * (1.0 - w) + &v[k + 1] * w
}

/// Horizon-continuation test shared by both methods: whether another
/// extension is needed, and the relative cost change.
pub(crate) fn needs_extension(
    settings: &OcpSettings,
    x0_dev: f64,
    xt_dev: f64,
    cost: f64,
    prev_cost: Option<f64>,
) -> (bool, f64) {
    let change = match prev_cost {
        Some(p) => (cost - p).abs() / cost.abs().max(1e-300),
        None => f64::INFINITY,
    };
    let terminal_ok = xt_dev <= settings.terminal_tol * x0_dev;
    (!(terminal_ok && change <= settings.cost_change_tol), change)
}

/// Forward-difference check helper shared by tests.
#[allow(dead_code)]
pub(crate) fn costate_rate_fd(model: &dyn ControlSystem, x: &DVector<f64>, lam: &DVector<f64>) -> DVector<f64> {
    let u = minimize_hamiltonian(model, x, lam).expect("valid inputs");
    -fd_jacobian(x, 1e-6, |xp| {
        DVector::from_element(1, model.cost_residual(xp, &u).norm_squared() + lam.dot(&model.rhs(xp, &u)))
    })
    .transpose()
    .column(0)
    .clone_owned()
}
