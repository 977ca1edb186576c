//! Quaternion attitude kinematics (scalar-first, inertial-to-body attitude).

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

/// `Ω(ω)` as used in `q̇ = ½ Ω q`.
pub fn omega_matrix(w: &Vector3<f64>) -> Matrix4<f64> {
    let (p, q, r) = (w[0], w[1], w[2]);
    Matrix4::new(
        0.0, -p, -q, -r, //
        p, 0.0, r, -q, //
        q, -r, 0.0, p, //
        r, q, -p, 0.0,
    )
}

pub fn quat_kinematics(q: &Vector4<f64>, w: &Vector3<f64>) -> Vector4<f64> {
    omega_matrix(w) * q * 0.5
}

/// Rotation taking body-frame vectors to the inertial frame.
pub fn body_to_inertial(q: &Vector4<f64>) -> Matrix3<f64> {
    let (e0, ex, ey, ez) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        e0 * e0 + ex * ex - ey * ey - ez * ez,
        2.0 * (ex * ey - ez * e0),
        2.0 * (ex * ez + ey * e0),
        2.0 * (ex * ey + ez * e0),
        e0 * e0 - ex * ex + ey * ey - ez * ez,
        2.0 * (ey * ez - ex * e0),
        2.0 * (ex * ez - ey * e0),
        2.0 * (ey * ez + ex * e0),
        e0 * e0 - ex * ex - ey * ey + ez * ez,
    )
}

/// Z-Y-X Euler angles (yaw ψ, pitch θ, roll φ) to a unit quaternion with `q₀ ≥ 0`.
pub fn euler_to_quat(psi: f64, theta: f64, phi: f64) -> Vector4<f64> {
    let (sy, cy) = (0.5 * psi).sin_cos();
    let (sp, cp) = (0.5 * theta).sin_cos();
    let (sr, cr) = (0.5 * phi).sin_cos();
    let q = Vector4::new(
        cy * cp * cr + sy * sp * sr,
        cy * cp * sr - sy * sp * cr,
        cy * sp * cr + sy * cp * sr,
        sy * cp * cr - cy * sp * sr,
    );
    let q = q.normalize();
    if q[0] < 0.0 {
        -q
    } else {
        q
    }
}

/// Inverse of [`euler_to_quat`]: returns (ψ, θ, φ).
pub fn quat_to_euler(q: &Vector4<f64>) -> (f64, f64, f64) {
    let (e0, ex, ey, ez) = (q[0], q[1], q[2], q[3]);
    let phi = (2.0 * (e0 * ex + ey * ez)).atan2(e0 * e0 + ez * ez - ex * ex - ey * ey);
    let theta = (2.0 * (e0 * ey - ex * ez)).clamp(-1.0, 1.0).asin();
    let psi = (2.0 * (e0 * ez + ex * ey)).atan2(e0 * e0 + ex * ex - ey * ey - ez * ez);
    (psi, theta, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_rate_and_roll_about_identity() {
        let q = Vector4::new(1.0, 0.0, 0.0, 0.0);
        assert_eq!(quat_kinematics(&q, &Vector3::zeros()), Vector4::zeros());
        let qd = quat_kinematics(&q, &Vector3::new(0.8, 0.0, 0.0));
        assert_eq!(qd, Vector4::new(0.0, 0.4, 0.0, 0.0));
    }

    #[test]
    fn rk4_step_preserves_norm() {
        let w = Vector3::new(0.6, -0.48, 0.64);
        let mut q = euler_to_quat(0.3, -0.2, 1.1);
        let h = 1e-3;
        let f = |q: &Vector4<f64>| quat_kinematics(q, &w);
        let k1 = f(&q);
        let k2 = f(&(q + k1 * (h / 2.0)));
        let k3 = f(&(q + k2 * (h / 2.0)));
        let k4 = f(&(q + k3 * h));
        let n0 = q.norm();
        q += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        assert!((q.norm() - n0).abs() < 1e-12);
    }

    #[test]
    fn rotation_of_pure_yaw() {
        let q = euler_to_quat(std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let v = body_to_inertial(&q) * Vector3::new(1.0, 0.0, 0.0);
        // Body x axis points east.
        assert!((v - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn pitch_up_raises_nose() {
        let q = euler_to_quat(0.0, 0.3, 0.0);
        let v = body_to_inertial(&q) * Vector3::new(1.0, 0.0, 0.0);
        assert!(v[2] < 0.0, "nose should point up (negative down component)");
    }

    proptest! {
        #[test]
        fn omega_is_skew(w in prop::array::uniform3(-5.0f64..5.0), q in prop::array::uniform4(-1.0f64..1.0)) {
            let q = Vector4::from(q);
            let om = omega_matrix(&Vector3::from(w));
            prop_assert!((om + om.transpose()).amax() == 0.0);
            prop_assert!(q.dot(&(om * q)).abs() < 1e-14);
        }

        #[test]
        fn euler_round_trip(psi in -3.1f64..3.1, theta in -1.5f64..1.5, phi in -3.1f64..3.1) {
            let q = euler_to_quat(psi, theta, phi);
            prop_assert!((q.norm() - 1.0).abs() < 1e-14);
            prop_assert!(q[0] >= 0.0);
            let (a, b, c) = quat_to_euler(&q);
            prop_assert!((a - psi).abs() < 1e-9 && (b - theta).abs() < 1e-9 && (c - phi).abs() < 1e-9);
            let r = body_to_inertial(&q);
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-14);
        }
    }
}
