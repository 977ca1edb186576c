//! Straight-and-level trim.

use nalgebra::{DMatrix, DVector, Vector3};

use super::kinematics::euler_to_quat;
use super::params::UavParams;
use super::{state_derivative, UavState};
use crate::error::{Error, Result};
use crate::linalg::{fd_jacobian, max_abs};
use crate::models::EquilibriumPair;

#[derive(Debug, Clone)]
pub struct TrimSolution {
    pub eq: EquilibriumPair,
    pub alpha: f64,
    pub beta: f64,
    /// `‖f(x_f, u_f)‖∞` over every component except the horizontal position rates.
    pub residual: f64,
    pub iterations: usize,
}

fn trim_state(va: f64, alpha: f64, beta: f64) -> UavState {
    UavState {
        p: Vector3::zeros(),
        v: Vector3::new(va * alpha.cos() * beta.cos(), va * beta.sin(), va * alpha.sin() * beta.cos()),
        q: euler_to_quat(0.0, alpha, 0.0),
        w: Vector3::zeros(),
    }
}

// Unknowns: (α, β, δt, δa, δe, δr). Equations: V̇ = 0, ω̇ = 0.
fn residual(p: &UavParams, va: f64, y: &DVector<f64>) -> DVector<f64> {
    let s = trim_state(va, y[0], y[1]);
    let xd = state_derivative(p, &s, &[y[2], y[3], y[4], y[5]]);
    DVector::from_vec(vec![xd.v[0], xd.v[1], xd.v[2], xd.w[0], xd.w[1], xd.w[2]])
}

/// Wings-level, zero-yaw trim at airspeed `va`: pitch equals angle of
/// attack so the flight path is horizontal.
pub fn compute_trim(p: &UavParams, va: f64) -> Result<TrimSolution> {
    if !(va > 1.0 && va < 100.0) {
        return Err(Error::InvalidArgument(format!("airspeed {va} m/s outside the flyable envelope")));
    }
    p.validate()?;
    let mut y = DVector::from_vec(vec![0.05, 0.0, 0.5, 0.0, -0.1, 0.0]);
    let mut f = residual(p, va, &y);
    let mut iterations = 0;
    while max_abs(f.as_slice()) > 1e-12 {
        if iterations == 100 {
            return Err(Error::NonConvergence(format!(
                "trim Newton iteration stalled with residual {:e} at {:?}",
                max_abs(f.as_slice()),
                y.as_slice()
            )));
        }
        iterations += 1;
        let jac: DMatrix<f64> = fd_jacobian(&y, 1e-7, |yp| residual(p, va, yp));
        let step = jac
            .lu()
            .solve(&(-&f))
            .ok_or_else(|| Error::NonConvergence("singular trim Jacobian".into()))?;
        let f_norm = f.norm();
        let mut t = 1.0;
        loop {
            let trial = &y + &step * t;
            let ft = residual(p, va, &trial);
            if ft.norm() < f_norm || t < 1e-6 {
                y = trial;
                f = ft;
                break;
            }
            t *= 0.5;
        }
    }
    let (alpha, beta) = (y[0], y[1]);
    let s = trim_state(va, alpha, beta);
    let u = [y[2], y[3], y[4], y[5]];
    let limits = [(0.0, 1.0), (-p.delta_a_max, p.delta_a_max), (-p.delta_e_max, p.delta_e_max), (-p.delta_r_max, p.delta_r_max)];
    for (i, (lo, hi)) in limits.iter().enumerate() {
        if !(u[i] > *lo && u[i] < *hi) {
            return Err(Error::NonConvergence(format!(
                "trim control {i} = {} at or beyond its bound [{lo}, {hi}]",
                u[i]
            )));
        }
    }
    let xd = state_derivative(p, &s, &u).pack();
    let residual = xd.iter().skip(2).fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(TrimSolution {
        eq: EquilibriumPair {
            x_f: s.pack(),
            u_f: DVector::from_row_slice(&u),
        },
        alpha,
        beta,
        residual,
        iterations,
    })
}
