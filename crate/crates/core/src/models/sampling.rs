//! Seeded initial-condition sampling.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::uav::euler_to_quat;
use super::ControlSystem;
use crate::error::{check_dim, Error, Result};

/// Number of sine modes used for PDE initial profiles.
const PROFILE_MODES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingDomain {
    /// `‖x₀ − x_f‖₂ = radius` exactly.
    Sphere { radius: f64 },
    /// `‖x₀ − x_f‖₂` uniform on `(0, radius]`.
    Ball { radius: f64 },
    /// Per-coordinate offsets from `x_f`, uniform on `[lo, hi]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// UAV flight domain about trim, every interval multiplied by `scale`:
    /// altitude `±3 h_ceil`, body velocity `±5 m/s`, yaw and roll `±180°`,
    /// pitch `±90°`, body rates `±30°/s`.
    Flight {
        #[serde(default = "unit")]
        scale: f64,
        #[serde(default = "default_h_ceil")]
        h_ceil: f64,
    },
}

fn unit() -> f64 {
    1.0
}
fn default_h_ceil() -> f64 {
    50.0
}

impl SamplingDomain {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Sphere { radius } | Self::Ball { radius } => *radius > 0.0 && radius.is_finite(),
            Self::Box { lo, hi } => lo.len() == hi.len() && lo.iter().zip(hi).all(|(a, b)| a <= b),
            Self::Flight { scale, h_ceil } => *scale > 0.0 && *scale <= 1.0 && *h_ceil > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sampling domain {self:?}")))
        }
    }
}

/// Unit-norm random direction. Collocated PDE states get smooth low-mode
/// sine profiles that vanish at the boundary; other states an isotropic
/// Gaussian direction.
fn direction(model: &dyn ControlSystem, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let n = model.state_dim();
    loop {
        let d = match model.collocation_nodes() {
            Some(nodes) => {
                let a: Vec<f64> = (0..PROFILE_MODES).map(|_| rng.random_range(-1.0..1.0)).collect();
                DVector::from_iterator(
                    n,
                    nodes.iter().map(|&xi| {
                        a.iter()
                            .enumerate()
                            .map(|(k, ak)| ak * ((k + 1) as f64 * PI * (xi + 1.0) / 2.0).sin())
                            .sum::<f64>()
                    }),
                )
            }
            None => DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal))),
        };
        let norm = d.norm();
        if norm > 1e-8 {
            return d / norm;
        }
    }
}

/// Draws `count` full-state initial conditions; identical seeds give identical draws.
pub fn sample_initial_conditions(
    model: &dyn ControlSystem,
    domain: &SamplingDomain,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    domain.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_f = &model.equilibrium().x_f;
    let n = model.state_dim();
    if let SamplingDomain::Box { lo, .. } = domain {
        check_dim("sampling box", lo.len(), n)?;
    }
    if let SamplingDomain::Flight { .. } = domain {
        check_dim("flight-domain state", n, 13)?;
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let x = match domain {
            SamplingDomain::Sphere { radius } => x_f + direction(model, &mut rng) * *radius,
            SamplingDomain::Ball { radius } => {
                let r = radius * (1.0 - rng.random::<f64>());
                x_f + direction(model, &mut rng) * r
            }
            SamplingDomain::Box { lo, hi } => DVector::from_iterator(
                n,
                (0..n).map(|i| x_f[i] + if lo[i] < hi[i] { rng.random_range(lo[i]..=hi[i]) } else { lo[i] }),
            ),
            SamplingDomain::Flight { scale, h_ceil } => {
                let s = *scale;
                let mut x = DVector::zeros(13);
                x[2] = x_f[2] + s * rng.random_range(-3.0 * h_ceil..=3.0 * h_ceil);
                for i in 3..6 {
                    x[i] = x_f[i] + s * rng.random_range(-5.0..=5.0);
                }
                let psi = s * rng.random_range(-PI..=PI);
                let theta = s * rng.random_range(-PI / 2.0..=PI / 2.0);
                let phi = s * rng.random_range(-PI..=PI);
                let q = euler_to_quat(psi, theta, phi);
                for i in 0..4 {
                    x[6 + i] = q[i];
                }
                let w_max = 30f64.to_radians();
                for i in 10..13 {
                    x[i] = x_f[i] + s * rng.random_range(-w_max..=w_max);
                }
                x
            }
        };
        out.push(x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::uav::quat_to_euler;
    use crate::models::{BurgersConfig, BurgersModel, LinearSystem, UavModel};

    #[test]
    fn sphere_draws_have_exact_radius() {
        let m = BurgersModel::new(BurgersConfig::with_size(16)).unwrap();
        let xs = sample_initial_conditions(&m, &SamplingDomain::Sphere { radius: 1.2 }, 50, 3).unwrap();
        for x in &xs {
            assert!((x.norm() - 1.2).abs() < 1e-12);
        }
        let again = sample_initial_conditions(&m, &SamplingDomain::Sphere { radius: 1.2 }, 50, 3).unwrap();
        assert_eq!(xs, again);
    }

    #[test]
    fn empty_and_invalid() {
        let m = LinearSystem::double_integrator();
        assert!(sample_initial_conditions(&m, &SamplingDomain::Ball { radius: 1.0 }, 0, 0)
            .unwrap()
            .is_empty());
        assert!(sample_initial_conditions(&m, &SamplingDomain::Ball { radius: -1.0 }, 1, 0).is_err());
        assert!(sample_initial_conditions(&m, &SamplingDomain::Flight { scale: 1.0, h_ceil: 50.0 }, 1, 0).is_err());
    }

    #[test]
    fn flight_domain_ranges() {
        let m = UavModel::aerosonde().unwrap();
        let d = SamplingDomain::Flight { scale: 1.0, h_ceil: 50.0 };
        let w_max = 30f64.to_radians();
        for x in sample_initial_conditions(&m, &d, 500, 11).unwrap() {
            let q = nalgebra::Vector4::new(x[6], x[7], x[8], x[9]);
            assert!((q.norm() - 1.0).abs() < 1e-14 && q[0] >= 0.0);
            let (_, theta, _) = quat_to_euler(&q);
            assert!(theta.abs() <= PI / 2.0 + 1e-12);
            assert!(x.rows(10, 3).iter().all(|w| w.abs() <= w_max));
            assert!((x[2] - m.equilibrium().x_f[2]).abs() <= 150.0);
        }
    }
}
