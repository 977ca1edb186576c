//! Six-degree-of-freedom fixed-wing UAV with quaternion attitude.
//!
//! Full state `x = (p, V, q, ω) ∈ R¹³`, control `u = (δt, δa, δe, δr)`.
//! The reduced chart used for design and learning is
//! `z = (p_d, V, q̄, ω) ∈ R¹⁰` with `q₀ = √(1 − ‖q̄‖²)`: the dynamics do not
//! depend on `(p_n, p_e)` and the quaternion norm is a conserved quantity.

pub mod aero;
pub mod kinematics;
pub mod params;
pub mod trim;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::{ControlBounds, ControlSystem, EquilibriumPair};
use crate::error::{check_dim, Error, Result};

pub use aero::{aero_coefficients, forces_moments, AeroCoefficients, ForcesMoments};
pub use kinematics::{body_to_inertial, euler_to_quat, quat_kinematics, quat_to_euler};
pub use params::UavParams;
pub use trim::{compute_trim, TrimSolution};

/// Full-state indices kept by the reduced chart.
pub const REDUCED_INDICES: [usize; 10] = [2, 3, 4, 5, 7, 8, 9, 10, 11, 12];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UavState {
    /// NED position, m.
    pub p: Vector3<f64>,
    /// Body velocity, m/s.
    pub v: Vector3<f64>,
    /// Scalar-first attitude quaternion.
    pub q: Vector4<f64>,
    /// Body rates, rad/s.
    pub w: Vector3<f64>,
}

impl UavState {
    pub fn pack(&self) -> DVector<f64> {
        DVector::from_iterator(
            13,
            self.p.iter().chain(self.v.iter()).chain(self.q.iter()).chain(self.w.iter()).copied(),
        )
    }

    pub fn unpack(x: &[f64]) -> Result<Self> {
        check_dim("UAV state", x.len(), 13)?;
        Ok(Self {
            p: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
            q: Vector4::new(x[6], x[7], x[8], x[9]),
            w: Vector3::new(x[10], x[11], x[12]),
        })
    }
}

fn unpack_unchecked(x: &[f64]) -> UavState {
    UavState {
        p: Vector3::new(x[0], x[1], x[2]),
        v: Vector3::new(x[3], x[4], x[5]),
        q: Vector4::new(x[6], x[7], x[8], x[9]),
        w: Vector3::new(x[10], x[11], x[12]),
    }
}

/// Rigid-body equations of motion; the returned struct holds the rates.
pub fn state_derivative(p: &UavParams, s: &UavState, u: &[f64; 4]) -> UavState {
    let fm = forces_moments(p, &s.v, &s.q, &s.w, u);
    let j = p.inertia();
    let j_inv = j.try_inverse().unwrap_or_else(Matrix3::zeros);
    UavState {
        p: body_to_inertial(&s.q) * s.v,
        v: -s.w.cross(&s.v) + fm.force / p.mass,
        q: quat_kinematics(&s.q, &s.w),
        w: j_inv * (-s.w.cross(&(j * s.w)) + fm.moment),
    }
}

/// Running-cost weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavCost {
    /// Altitude saturation scale, m.
    pub h_ceil: f64,
    pub q_h: f64,
    pub q_v: [f64; 3],
    pub q_q: f64,
    pub q_omega: f64,
    pub r: [f64; 4],
}

impl UavCost {
    pub fn standard(p: &UavParams, airspeed: f64) -> Self {
        let h_ceil = 50.0;
        let w30 = 30f64.to_radians();
        Self {
            h_ceil,
            q_h: 1.0 / (h_ceil * h_ceil),
            q_v: [10.0 / (airspeed * airspeed), 1.0, 1.0],
            q_q: 5.0,
            q_omega: 1.0 / (w30 * w30),
            r: [
                0.1,
                0.1 / (p.delta_a_max * p.delta_a_max),
                1.0 / (p.delta_e_max * p.delta_e_max),
                1.0 / (p.delta_r_max * p.delta_r_max),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct UavModel {
    params: UavParams,
    airspeed: f64,
    cost: UavCost,
    trim: TrimSolution,
    bounds: ControlBounds,
    /// Altitude band (m) about the trim altitude outside which simulations abort.
    pub envelope: f64,
}

impl UavModel {
    pub fn new(params: UavParams, airspeed: f64) -> Result<Self> {
        let trim = compute_trim(&params, airspeed)?;
        let bounds = ControlBounds::new(
            vec![0.0, -params.delta_a_max, -params.delta_e_max, -params.delta_r_max],
            vec![1.0, params.delta_a_max, params.delta_e_max, params.delta_r_max],
        )?;
        bounds.check_interior(trim.eq.u_f.as_slice())?;
        let cost = UavCost::standard(&params, airspeed);
        Ok(Self {
            params,
            airspeed,
            cost,
            trim,
            bounds,
            envelope: 300.0,
        })
    }

    pub fn aerosonde() -> Result<Self> {
        Self::new(UavParams::aerosonde(), 20.0)
    }

    pub fn params(&self) -> &UavParams {
        &self.params
    }
    pub fn airspeed(&self) -> f64 {
        self.airspeed
    }
    pub fn cost(&self) -> &UavCost {
        &self.cost
    }
    pub fn trim(&self) -> &TrimSolution {
        &self.trim
    }

    fn control_array(u: &DVector<f64>) -> [f64; 4] {
        [u[0], u[1], u[2], u[3]]
    }
}

/// Vector quaternion with the sign fixed so that `q₀ ≥ 0`.
fn canonical_vector_part(q: &Vector4<f64>) -> Vector3<f64> {
    let s = if q[0] < 0.0 { -1.0 } else { 1.0 };
    Vector3::new(q[1], q[2], q[3]) * s
}

impl ControlSystem for UavModel {
    fn id(&self) -> String {
        let name = if self.params.name.is_empty() { "uav" } else { &self.params.name };
        format!("uav-{name}-{}mps", self.airspeed)
    }
    fn state_dim(&self) -> usize {
        13
    }
    fn control_dim(&self) -> usize {
        4
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let s = unpack_unchecked(x.as_slice());
        state_derivative(&self.params, &s, &Self::control_array(u)).pack()
    }

    fn cost_residual(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let c = &self.cost;
        let xf = &self.trim.eq.x_f;
        let uf = &self.trim.eq.u_f;
        let s = unpack_unchecked(x.as_slice());
        let sf = unpack_unchecked(xf.as_slice());
        let mut r = Vec::with_capacity(14);
        r.push(c.q_h.sqrt() * c.h_ceil * ((s.p[2] - sf.p[2]) / c.h_ceil).tanh());
        for i in 0..3 {
            r.push(c.q_v[i].sqrt() * (s.v[i] - sf.v[i]));
        }
        let qv = canonical_vector_part(&s.q);
        let qv_f = canonical_vector_part(&sf.q);
        for i in 0..3 {
            r.push(c.q_q.sqrt() * (qv[i] - qv_f[i]));
        }
        for i in 0..3 {
            r.push(c.q_omega.sqrt() * (s.w[i] - sf.w[i]));
        }
        for i in 0..4 {
            r.push(c.r[i].sqrt() * (u[i] - uf[i]));
        }
        DVector::from_vec(r)
    }

    fn equilibrium(&self) -> &EquilibriumPair {
        &self.trim.eq
    }
    fn bounds(&self) -> &ControlBounds {
        &self.bounds
    }

    // The vector field is affine in u, so unit differences are exact.
    fn control_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let u0 = &self.trim.eq.u_f;
        let f0 = self.rhs(x, u0);
        let mut b = DMatrix::zeros(13, 4);
        for j in 0..4 {
            let mut uj = u0.clone();
            uj[j] += 1.0;
            b.set_column(j, &(self.rhs(x, &uj) - &f0));
        }
        b
    }

    fn equilibrium_mask(&self) -> Vec<bool> {
        (0..13).map(|i| i >= 2).collect()
    }

    fn has_reduction(&self) -> bool {
        true
    }
    fn reduced_dim(&self) -> usize {
        10
    }
    fn reduce(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = unpack_unchecked(x.as_slice());
        let n = s.q.norm();
        let qv = canonical_vector_part(&s.q) / if n > 0.0 { n } else { 1.0 };
        DVector::from_vec(vec![s.p[2], s.v[0], s.v[1], s.v[2], qv[0], qv[1], qv[2], s.w[0], s.w[1], s.w[2]])
    }
    fn embed(&self, z: &DVector<f64>) -> DVector<f64> {
        let qv2 = z[4] * z[4] + z[5] * z[5] + z[6] * z[6];
        let q0 = (1.0 - qv2).max(0.0).sqrt();
        DVector::from_vec(vec![
            0.0, 0.0, z[0], z[1], z[2], z[3], q0, z[4], z[5], z[6], z[7], z[8], z[9],
        ])
    }
    fn reduce_rate(&self, x: &DVector<f64>, xdot: &DVector<f64>) -> DVector<f64> {
        let s = if x[6] < 0.0 { -1.0 } else { 1.0 };
        DVector::from_vec(vec![
            xdot[2],
            xdot[3],
            xdot[4],
            xdot[5],
            s * xdot[7],
            s * xdot[8],
            s * xdot[9],
            xdot[10],
            xdot[11],
            xdot[12],
        ])
    }

    fn validate_state(&self, x: &DVector<f64>) -> Result<()> {
        let n = (x[6] * x[6] + x[7] * x[7] + x[8] * x[8] + x[9] * x[9]).sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidArgument(format!("quaternion norm {n} is not 1")));
        }
        Ok(())
    }

    fn project_state(&self, x: &mut DVector<f64>) -> f64 {
        let n = (x[6] * x[6] + x[7] * x[7] + x[8] * x[8] + x[9] * x[9]).sqrt();
        if n > 0.0 {
            for i in 6..10 {
                x[i] /= n;
            }
        }
        (n - 1.0).abs()
    }

    fn default_horizon(&self) -> f64 {
        5.0
    }

    fn default_sim_horizon(&self) -> f64 {
        120.0
    }

    fn envelope_violated(&self, x: &DVector<f64>) -> bool {
        (x[2] - self.trim.eq.x_f[2]).abs() > self.envelope
    }
}
