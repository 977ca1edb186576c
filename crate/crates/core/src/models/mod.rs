//! Controlled systems: the common abstraction plus the Burgers and UAV testbeds.

pub mod burgers;
pub mod chebyshev;
pub mod config;
pub mod linear;
pub mod sampling;
pub mod uav;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::{fd_jacobian, is_positive_definite, symmetrize};

pub use burgers::{BurgersConfig, BurgersModel};
pub use linear::LinearSystem;
pub use sampling::{sample_initial_conditions, SamplingDomain};
pub use uav::{UavModel, UavParams, UavState};

/// Box control constraints. Channels with `bounded[i] == false` are free.
///
/// Serialized as `{"u_min": [...], "u_max": [...]}` with `null` for a free channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoundsRepr", into = "BoundsRepr")]
pub struct ControlBounds {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub bounded: Vec<bool>,
}

impl ControlBounds {
    pub fn unbounded(m: usize) -> Self {
        Self {
            u_min: vec![f64::NEG_INFINITY; m],
            u_max: vec![f64::INFINITY; m],
            bounded: vec![false; m],
        }
    }

    pub fn new(u_min: Vec<f64>, u_max: Vec<f64>) -> Result<Self> {
        check_dim("u_max", u_max.len(), u_min.len())?;
        let bounded = vec![true; u_min.len()];
        let b = Self {
            u_min,
            u_max,
            bounded,
        };
        for i in 0..b.dim() {
            if !(b.u_min[i] < b.u_max[i]) {
                return Err(Error::InvalidArgument(format!(
                    "control channel {i}: u_min {} must be below u_max {}",
                    b.u_min[i], b.u_max[i]
                )));
            }
        }
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.u_min.len()
    }

    pub fn any_bounded(&self) -> bool {
        self.bounded.iter().any(|&b| b)
    }

    /// Checks that `u` lies strictly inside every bounded channel.
    pub fn check_interior(&self, u: &[f64]) -> Result<()> {
        check_dim("control", u.len(), self.dim())?;
        for i in 0..self.dim() {
            if self.bounded[i] && !(self.u_min[i] < u[i] && u[i] < self.u_max[i]) {
                return Err(Error::InvalidArgument(format!(
                    "equilibrium control channel {i} = {} not interior to [{}, {}]",
                    u[i], self.u_min[i], self.u_max[i]
                )));
            }
        }
        Ok(())
    }

    /// Hard saturation onto the box.
    pub fn clip(&self, u: &mut [f64]) {
        for i in 0..self.dim() {
            if self.bounded[i] {
                u[i] = u[i].clamp(self.u_min[i], self.u_max[i]);
            }
        }
    }

    /// 1 where the channel is strictly inside its bounds (derivative of `clip`).
    pub fn clip_mask(&self, u: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                if !self.bounded[i] || (self.u_min[i] <= u[i] && u[i] <= self.u_max[i]) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsRepr {
    u_min: Vec<Option<f64>>,
    u_max: Vec<Option<f64>>,
}

impl From<ControlBounds> for BoundsRepr {
    fn from(b: ControlBounds) -> Self {
        let pick = |v: &[f64]| {
            v.iter()
                .zip(&b.bounded)
                .map(|(x, &on)| on.then_some(*x))
                .collect()
        };
        Self {
            u_min: pick(&b.u_min),
            u_max: pick(&b.u_max),
        }
    }
}

impl TryFrom<BoundsRepr> for ControlBounds {
    type Error = Error;

    fn try_from(r: BoundsRepr) -> Result<Self> {
        check_dim("u_max", r.u_max.len(), r.u_min.len())?;
        let m = r.u_min.len();
        let mut b = ControlBounds::unbounded(m);
        for i in 0..m {
            match (r.u_min[i], r.u_max[i]) {
                (Some(lo), Some(hi)) => {
                    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::InvalidArgument(format!("control channel {i}: bad bounds [{lo}, {hi}]")));
                    }
                    b.u_min[i] = lo;
                    b.u_max[i] = hi;
                    b.bounded[i] = true;
                }
                (None, None) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "control channel {i}: one-sided bounds are not supported"
                    )))
                }
            }
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPair {
    pub x_f: DVector<f64>,
    pub u_f: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemLinearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostQuadratic {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// A controlled vector field `ẋ = f(x, u)` with running cost
/// `L(x, u) = ‖r(x, u)‖²`, an equilibrium pair and box bounds.
///
/// Systems with redundant or ignorable coordinates (the UAV's horizontal
/// position and quaternion norm) expose a *reduced* coordinate chart; LQR
/// design, open-loop optimization and learning happen in that chart, while
/// simulation integrates the full state.
pub trait ControlSystem: Send + Sync {
    fn id(&self) -> String;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Unchecked vector field.
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// Residual vector whose squared norm is the running cost.
    fn cost_residual(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn equilibrium(&self) -> &EquilibriumPair;
    fn bounds(&self) -> &ControlBounds;

    fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(x, 1e-6, |xp| self.rhs(xp, u))
    }

    fn control_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(u, 1e-6, |up| self.rhs(x, up))
    }

    /// `∂f/∂u` for control-affine systems; independent of `u`.
    fn control_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.control_jacobian(x, &self.equilibrium().u_f)
    }

    /// True when `∂f/∂u` does not depend on the state.
    fn constant_control_matrix(&self) -> bool {
        false
    }

    /// Quadratic weights of the running cost at the equilibrium. The default
    /// uses the Jacobians `J` of the (zero at equilibrium) cost residual, for
    /// which the weight matrix is exactly `JᵀJ`.
    fn cost_weights(&self) -> CostQuadratic {
        let eq = self.equilibrium();
        let jx = fd_jacobian(&eq.x_f, 1e-6, |xp| self.cost_residual(xp, &eq.u_f));
        let ju = fd_jacobian(&eq.u_f, 1e-6, |up| self.cost_residual(&eq.x_f, up));
        CostQuadratic {
            q: symmetrize(&(jx.transpose() * &jx)),
            r: symmetrize(&(ju.transpose() * &ju)),
        }
    }

    /// Gradient of the state-dependent cost term `q(x)`.
    fn cost_state_gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let r = self.cost_residual(x, u);
        let jx = fd_jacobian(x, 1e-6, |xp| self.cost_residual(xp, u));
        jx.transpose() * r * 2.0
    }

    /// Model-specific admissibility check (e.g. quaternion norm).
    fn validate_state(&self, _x: &DVector<f64>) -> Result<()> {
        Ok(())
    }

    /// Mask of state-rate components that must vanish at equilibrium.
    fn equilibrium_mask(&self) -> Vec<bool> {
        vec![true; self.state_dim()]
    }

    /// Initial horizon for open-loop solves, in the model's time unit.
    fn default_horizon(&self) -> f64 {
        2.0
    }

    /// Final time of closed-loop simulations, in the model's time unit.
    fn default_sim_horizon(&self) -> f64 {
        30.0
    }

    /// `(∂r/∂x, ∂r/∂u)` of the cost residual.
    fn cost_residual_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            fd_jacobian(x, 1e-6, |xp| self.cost_residual(xp, u)),
            fd_jacobian(u, 1e-6, |up| self.cost_residual(x, up)),
        )
    }

    /// Spatial collocation nodes for PDE-derived systems.
    fn collocation_nodes(&self) -> Option<Vec<f64>> {
        None
    }

    fn has_reduction(&self) -> bool {
        false
    }
    fn reduced_dim(&self) -> usize {
        self.state_dim()
    }
    fn reduce(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn embed(&self, z: &DVector<f64>) -> DVector<f64> {
        z.clone()
    }
    fn reduce_rate(&self, _x: &DVector<f64>, xdot: &DVector<f64>) -> DVector<f64> {
        xdot.clone()
    }

    /// Projects a full state back onto its admissible manifold in place and
    /// returns the size of the correction (e.g. quaternion renormalization).
    fn project_state(&self, _x: &mut DVector<f64>) -> f64 {
        0.0
    }

    /// True when the state has left the flight/simulation envelope.
    fn envelope_violated(&self, _x: &DVector<f64>) -> bool {
        false
    }
}

/// View of a system in its reduced coordinates.
pub struct Reduced {
    inner: Arc<dyn ControlSystem>,
    eq: EquilibriumPair,
}

impl Reduced {
    pub fn new(model: Arc<dyn ControlSystem>) -> Self {
        let eq = model.equilibrium();
        let eq = EquilibriumPair {
            x_f: model.reduce(&eq.x_f),
            u_f: eq.u_f.clone(),
        };
        Self { inner: model, eq }
    }

    pub fn full(&self) -> &dyn ControlSystem {
        &*self.inner
    }
}

/// The model in the coordinates used for design, optimization and learning:
/// the reduced chart when the model has one, otherwise the model itself.
pub fn design_model(model: &Arc<dyn ControlSystem>) -> Arc<dyn ControlSystem> {
    if model.has_reduction() {
        Arc::new(Reduced::new(model.clone()))
    } else {
        model.clone()
    }
}

impl ControlSystem for Reduced {
    fn id(&self) -> String {
        self.inner.id()
    }
    fn state_dim(&self) -> usize {
        self.inner.reduced_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn rhs(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        if !self.inner.has_reduction() {
            return self.inner.rhs(z, u);
        }
        let x = self.inner.embed(z);
        let xd = self.inner.rhs(&x, u);
        self.inner.reduce_rate(&x, &xd)
    }
    fn cost_residual(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        if !self.inner.has_reduction() {
            return self.inner.cost_residual(z, u);
        }
        self.inner.cost_residual(&self.inner.embed(z), u)
    }
    fn equilibrium(&self) -> &EquilibriumPair {
        &self.eq
    }
    fn bounds(&self) -> &ControlBounds {
        self.inner.bounds()
    }
    fn state_jacobian(&self, z: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        if !self.inner.has_reduction() {
            return self.inner.state_jacobian(z, u);
        }
        fd_jacobian(z, 1e-6, |zp| self.rhs(zp, u))
    }
    fn control_jacobian(&self, z: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        if !self.inner.has_reduction() {
            return self.inner.control_jacobian(z, u);
        }
        fd_jacobian(u, 1e-6, |up| self.rhs(z, up))
    }
    fn control_matrix(&self, z: &DVector<f64>) -> DMatrix<f64> {
        if !self.inner.has_reduction() {
            return self.inner.control_matrix(z);
        }
        self.control_jacobian(z, &self.eq.u_f)
    }
    fn constant_control_matrix(&self) -> bool {
        self.inner.constant_control_matrix()
    }
    fn cost_weights(&self) -> CostQuadratic {
        if !self.inner.has_reduction() {
            return self.inner.cost_weights();
        }
        let eq = &self.eq;
        let jx = fd_jacobian(&eq.x_f, 1e-6, |zp| self.cost_residual(zp, &eq.u_f));
        let ju = fd_jacobian(&eq.u_f, 1e-6, |up| self.cost_residual(&eq.x_f, up));
        CostQuadratic {
            q: symmetrize(&(jx.transpose() * &jx)),
            r: symmetrize(&(ju.transpose() * &ju)),
        }
    }
    fn cost_state_gradient(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        if !self.inner.has_reduction() {
            return self.inner.cost_state_gradient(z, u);
        }
        let r = self.cost_residual(z, u);
        let jz = fd_jacobian(z, 1e-6, |zp| self.cost_residual(zp, u));
        jz.transpose() * r * 2.0
    }
    fn collocation_nodes(&self) -> Option<Vec<f64>> {
        self.inner.collocation_nodes()
    }
    fn default_horizon(&self) -> f64 {
        self.inner.default_horizon()
    }
}

fn check_state_control(model: &dyn ControlSystem, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    check_dim("state", x.len(), model.state_dim())?;
    check_dim("control", u.len(), model.control_dim())?;
    check_finite("state", x.as_slice())?;
    check_finite("control", u.as_slice())?;
    model.validate_state(x)
}

/// Evaluates `ẋ = f(x, u)` with dimension and finiteness checks.
pub fn dynamics_rhs(model: &dyn ControlSystem, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_state_control(model, x, u)?;
    let xd = model.rhs(x, u);
    check_finite("state rate", xd.as_slice())?;
    Ok(xd)
}

/// Jacobians `A = ∂f/∂x`, `B = ∂f/∂u` at `(x, u)`.
pub fn linearize(model: &dyn ControlSystem, x: &DVector<f64>, u: &DVector<f64>) -> Result<SystemLinearization> {
    check_state_control(model, x, u)?;
    let a = model.state_jacobian(x, u);
    let b = model.control_jacobian(x, u);
    check_finite("state Jacobian", a.as_slice())?;
    check_finite("control Jacobian", b.as_slice())?;
    Ok(SystemLinearization { a, b })
}

pub fn running_cost(model: &dyn ControlSystem, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    check_state_control(model, x, u)?;
    Ok(model.cost_residual(x, u).norm_squared())
}

/// Quadratic cost weights `(Q, R)` at the equilibrium, validated.
pub fn cost_quadratic(model: &dyn ControlSystem) -> Result<CostQuadratic> {
    let c = model.cost_weights();
    if !is_positive_definite(&c.r) {
        return Err(Error::InvalidArgument("control weight R is not positive definite".into()));
    }
    if !c.q.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("state weight Q".into()));
    }
    Ok(c)
}

/// Residual `‖f(x_f, u_f)‖∞` over the components that must vanish.
pub fn equilibrium_residual(model: &dyn ControlSystem) -> f64 {
    let eq = model.equilibrium();
    let f = model.rhs(&eq.x_f, &eq.u_f);
    model
        .equilibrium_mask()
        .iter()
        .zip(f.iter())
        .filter(|(m, _)| **m)
        .fold(0.0, |a, (_, v)| a.max(v.abs()))
}
