//! Aerodynamic and propulsive forces and moments.

use nalgebra::{Vector3, Vector4};

use super::kinematics::body_to_inertial;
use super::params::UavParams;

/// Airspeed floor for the `c/(2‖V‖)` rate terms.
pub const AIRSPEED_GUARD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeroCoefficients {
    pub c_l: f64,
    pub c_d: f64,
    pub c_m: f64,
    pub sigma: f64,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stall blend, `≈ 0` inside `|α| < α_stall` and `≈ 1` outside. Algebraically
/// identical to `(1 + e^{−M(α−α₀)} + e^{M(α+α₀)}) / ((1 + e^{−M(α−α₀)})(1 + e^{M(α+α₀)}))`
/// but free of overflow.
pub fn stall_blend(p: &UavParams, alpha: f64) -> f64 {
    let m = p.blend_sharpness;
    let a0 = p.alpha_stall;
    1.0 - logistic(m * (a0 - alpha)) * logistic(m * (a0 + alpha))
}

pub fn aero_coefficients(p: &UavParams, alpha: f64) -> AeroCoefficients {
    let sigma = stall_blend(p, alpha);
    let (s, c) = alpha.sin_cos();
    let lin_lift = p.c_l0 + p.c_l_alpha * alpha;
    let plate_lift = 2.0 * alpha.signum() * s * s * c;
    let c_l = (1.0 - sigma) * lin_lift + sigma * plate_lift;
    let aspect = std::f64::consts::PI * p.e * p.b * p.b / p.s_wing;
    let c_d = (1.0 - sigma) * (p.c_d0 + lin_lift * lin_lift / aspect) + sigma * 2.0 * s * s;
    let c_m = (1.0 - sigma) * (p.c_m0 + p.c_m_alpha * alpha).tanh() + sigma * p.c_m_inf * (-s);
    AeroCoefficients { c_l, c_d, c_m, sigma }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForcesMoments {
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
}

/// Body-frame force and moment at body velocity `v`, attitude `q`, body rates
/// `w` and control `(δt, δa, δe, δr)`.
pub fn forces_moments(
    p: &UavParams,
    v: &Vector3<f64>,
    q: &Vector4<f64>,
    w: &Vector3<f64>,
    u: &[f64; 4],
) -> ForcesMoments {
    let [dt, da, de, dr] = *u;
    let gravity = body_to_inertial(q).transpose() * Vector3::new(0.0, 0.0, p.mass * p.gravity);

    let va_true = v.norm();
    let prop_gain = 0.5 * p.rho * std::f64::consts::PI * p.r_prop * p.r_prop * p.c_prop;
    let prop = Vector3::new(prop_gain * (p.k_motor * p.k_motor * dt - va_true * va_true), 0.0, 0.0);

    let va = va_true.max(AIRSPEED_GUARD);
    let alpha = v[2].atan2(v[0]);
    let beta = (v[1] / va).clamp(-1.0, 1.0).asin();
    let qbar_s = 0.5 * p.rho * va * va * p.s_wing;
    let (pr, qr, rr) = (w[0], w[1], w[2]);
    let coef = aero_coefficients(p, alpha);
    let cq = p.c / (2.0 * va);
    let bq = p.b / (2.0 * va);

    let lift = qbar_s * (coef.c_l + p.c_l_q * cq * qr + p.c_l_delta_e * de);
    let drag = qbar_s * (coef.c_d + p.c_d_q * cq * qr + p.c_d_delta_e * de);
    let (sa, ca) = alpha.sin_cos();
    let fx = -ca * drag + sa * lift;
    let fz = -sa * drag - ca * lift;
    let fy = qbar_s
        * (p.c_y0 + p.c_y_beta * beta + p.c_y_p * bq * pr + p.c_y_r * bq * rr + p.c_y_delta_a * da + p.c_y_delta_r * dr);

    let m_ell = qbar_s
        * p.b
        * (p.c_ell0 + p.c_ell_beta * beta + p.c_ell_p * bq * pr + p.c_ell_r * bq * rr + p.c_ell_delta_a * da + p.c_ell_delta_r * dr);
    let m_m = qbar_s * p.c * (coef.c_m + p.c_m_q * cq * qr + p.c_m_delta_e * de);
    let m_n = qbar_s
        * p.b
        * (p.c_n0 + p.c_n_beta * beta + p.c_n_p * bq * pr + p.c_n_r * bq * rr + p.c_n_delta_a * da + p.c_n_delta_r * dr);

    ForcesMoments {
        force: gravity + prop + Vector3::new(fx, fy, fz),
        moment: Vector3::new(m_ell, m_m, m_n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::uav::kinematics::euler_to_quat;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn blend_limits() {
        let p = UavParams::aerosonde();
        assert!(stall_blend(&p, 0.0) < 0.01);
        assert!(stall_blend(&p, FRAC_PI_2) > 0.99);
        assert!(stall_blend(&p, -FRAC_PI_2) > 0.99);
        // Closed form agrees where it does not overflow.
        let (m, a0) = (p.blend_sharpness, p.alpha_stall);
        for a in [-0.5, -0.3, 0.0, 0.2, 0.35, 0.6] {
            let e1 = (-m * (a - a0)).exp();
            let e2 = (m * (a + a0)).exp();
            let direct = (1.0 + e1 + e2) / ((1.0 + e1) * (1.0 + e2));
            assert!((direct - stall_blend(&p, a)).abs() < 1e-14);
        }
    }

    #[test]
    fn coefficients_at_zero_and_right_angle() {
        let p = UavParams::aerosonde();
        let c0 = aero_coefficients(&p, 0.0);
        let aspect = std::f64::consts::PI * p.e * p.b * p.b / p.s_wing;
        assert!(((c0.c_l - p.c_l0) / p.c_l0).abs() < 0.01);
        let cd_expect = p.c_d0 + p.c_l0 * p.c_l0 / aspect;
        assert!(((c0.c_d - cd_expect) / cd_expect).abs() < 0.01);
        let c90 = aero_coefficients(&p, FRAC_PI_2);
        assert!((c90.c_d - 2.0).abs() < 0.02);
        assert!(c90.c_l.abs() < 0.02);
    }

    fn max_jump(p: &UavParams, h: f64) -> f64 {
        let mut prev = aero_coefficients(p, -std::f64::consts::PI);
        let steps = (2.0 * std::f64::consts::PI / h) as usize;
        let mut worst = 0.0f64;
        for i in 1..=steps {
            let a = -std::f64::consts::PI + i as f64 * h;
            let c = aero_coefficients(p, a);
            assert!(c.c_d >= 0.0, "C_D < 0 at {a}");
            assert!((0.0..=1.0).contains(&c.sigma));
            worst = worst
                .max((c.c_l - prev.c_l).abs())
                .max((c.c_d - prev.c_d).abs())
                .max((c.c_m - prev.c_m).abs());
            prev = c;
        }
        worst
    }

    #[test]
    fn curves_are_continuous_and_drag_nonnegative() {
        // The lift blend at the stall angle has slope ≈ M/4 · (linear − plate lift) ≈ 21/rad,
        // so grid jumps shrink in proportion to the spacing.
        let p = UavParams::aerosonde();
        let coarse = max_jump(&p, 1e-4);
        let fine = max_jump(&p, 1e-5);
        assert!(coarse < 2.5e-3, "coarse jump {coarse}");
        assert!(fine < 1e-3 && fine < 0.2 * coarse, "fine jump {fine}");
        let mut soft = p.clone();
        soft.blend_sharpness = 15.0;
        assert!(max_jump(&soft, 1e-4) < 1e-3);
    }

    #[test]
    fn gravity_magnitude_is_weight() {
        let p = UavParams::aerosonde();
        let q = euler_to_quat(0.7, -0.4, 2.1);
        let g = body_to_inertial(&q).transpose() * Vector3::new(0.0, 0.0, p.mass * p.gravity);
        assert!((g.norm() - p.mass * p.gravity).abs() < 1e-12);
    }

    #[test]
    fn zero_thrust_and_symmetric_lateral() {
        let p = UavParams::aerosonde();
        let v = Vector3::new(20.0, 0.0, 0.0);
        let q = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let w = Vector3::zeros();
        let dt = p.zero_thrust_throttle(20.0);
        let with = forces_moments(&p, &v, &q, &w, &[dt, 0.0, 0.0, 0.0]);
        let aero_only = {
            let mut pp = p.clone();
            pp.c_prop = 0.0;
            forces_moments(&pp, &v, &q, &w, &[dt, 0.0, 0.0, 0.0])
        };
        assert!((with.force - aero_only.force).norm() < 1e-12);
        assert_eq!(with.force[1], 0.0);
        assert_eq!(with.moment[0], 0.0);
        assert_eq!(with.moment[2], 0.0);
    }
}
