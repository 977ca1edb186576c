//! Airframe parameters. Angles in radians, SI units throughout.

use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const AEROSONDE: &str = include_str!("../../../data/aerosonde.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UavParams {
    #[serde(default)]
    pub name: String,
    /// kg
    pub mass: f64,
    /// Inertia entries, kg·m². `jxz` is the product of inertia (J = [[jx,0,−jxz],[0,jy,0],[−jxz,0,jz]]).
    pub jx: f64,
    pub jy: f64,
    pub jz: f64,
    pub jxz: f64,
    /// m/s²
    pub gravity: f64,
    /// Wing area (m²), span (m), mean chord (m).
    pub s_wing: f64,
    pub b: f64,
    pub c: f64,
    /// kg/m³
    pub rho: f64,
    /// Propeller radius (m), thrust efficiency, motor constant (m/s per unit throttle^½).
    pub r_prop: f64,
    pub c_prop: f64,
    pub k_motor: f64,

    pub c_l0: f64,
    pub c_l_alpha: f64,
    pub c_l_q: f64,
    pub c_l_delta_e: f64,
    pub c_d0: f64,
    pub c_d_q: f64,
    pub c_d_delta_e: f64,
    /// Oswald efficiency.
    pub e: f64,
    pub c_m0: f64,
    pub c_m_alpha: f64,
    pub c_m_q: f64,
    pub c_m_delta_e: f64,
    pub c_m_inf: f64,
    pub alpha_stall: f64,
    /// Logistic blend steepness, 1/rad.
    pub blend_sharpness: f64,

    pub c_y0: f64,
    pub c_y_beta: f64,
    pub c_y_p: f64,
    pub c_y_r: f64,
    pub c_y_delta_a: f64,
    pub c_y_delta_r: f64,
    pub c_ell0: f64,
    pub c_ell_beta: f64,
    pub c_ell_p: f64,
    pub c_ell_r: f64,
    pub c_ell_delta_a: f64,
    pub c_ell_delta_r: f64,
    pub c_n0: f64,
    pub c_n_beta: f64,
    pub c_n_p: f64,
    pub c_n_r: f64,
    pub c_n_delta_a: f64,
    pub c_n_delta_r: f64,

    /// Surface deflection limits (rad); throttle is always in [0, 1].
    pub delta_a_max: f64,
    pub delta_e_max: f64,
    pub delta_r_max: f64,
}

impl UavParams {
    /// The shipped Aerosonde-class airframe.
    pub fn aerosonde() -> Self {
        serde_json::from_str(AEROSONDE).expect("embedded parameter file is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    /// Loads a parameter file; the bare name `aerosonde.json` falls back to
    /// the embedded copy when no such file exists.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() && path.file_name().is_some_and(|f| f == "aerosonde.json") {
            return Ok(Self::aerosonde());
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.jx, 0.0, -self.jxz, //
            0.0, self.jy, 0.0, //
            -self.jxz, 0.0, self.jz,
        )
    }

    /// Throttle at which the propeller force vanishes for airspeed `va`.
    pub fn zero_thrust_throttle(&self, va: f64) -> f64 {
        va * va / (self.k_motor * self.k_motor)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("s_wing", self.s_wing),
            ("b", self.b),
            ("c", self.c),
            ("rho", self.rho),
            ("r_prop", self.r_prop),
            ("c_prop", self.c_prop),
            ("k_motor", self.k_motor),
            ("e", self.e),
            ("blend_sharpness", self.blend_sharpness),
            ("delta_a_max", self.delta_a_max),
            ("delta_e_max", self.delta_e_max),
            ("delta_r_max", self.delta_r_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("parameter {name} must be positive, got {v}")));
            }
        }
        if !(self.alpha_stall > 0.0 && self.alpha_stall < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config(format!(
                "alpha_stall must lie in (0, pi/2), got {}",
                self.alpha_stall
            )));
        }
        if self.inertia().cholesky().is_none() {
            return Err(Error::Config("inertia matrix is not positive definite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_file_is_valid() {
        let p = UavParams::aerosonde();
        p.validate().unwrap();
        assert_eq!(p.c_prop, 0.45);
        assert_eq!(p.k_motor, 32.0);
        assert_eq!(p.c_m_inf, 0.8);
        assert!((p.alpha_stall.to_degrees() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn zero_thrust_throttle_at_cruise() {
        assert_eq!(UavParams::aerosonde().zero_thrust_throttle(20.0), 0.390625);
    }

    #[test]
    fn rejects_bad_values() {
        let mut p = UavParams::aerosonde();
        p.alpha_stall = 2.0;
        assert!(p.validate().is_err());
        let mut p = UavParams::aerosonde();
        p.mass = 0.0;
        assert!(p.validate().is_err());
        assert!(UavParams::from_json("{\"mass\": 1}").is_err());
    }
}
