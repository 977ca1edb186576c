//! Unstable Burgers'-type reaction–diffusion PDE, Chebyshev-collocated.
//!
//! `ẋ = −½ D(x∘x) + ν D² x + α∘x∘e^{−βx} + B u` on the interior Chebyshev
//! nodes with homogeneous Dirichlet data at `ξ = ±1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::chebyshev::{chebyshev_diff_matrix, chebyshev_nodes, clenshaw_curtis_weights, interior};
use super::{ControlBounds, ControlSystem, CostQuadratic, EquilibriumPair};
use crate::error::{check_dim, Error, Result};

/// Burgers testbed parameters. `n` is the number of interior nodes (the state
/// dimension); the Chebyshev grid has `n + 2` points. Optional vectors fall
/// back to the shipped defaults when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersConfig {
    pub n: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Reaction gain per interior node; default `2 exp(−9ξ²)`.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    /// Actuator profiles as columns (`m` vectors of length `n`); default
    /// Gaussian bumps `exp(−(ξ − c)²/0.04)` centred at ±0.5.
    #[serde(default)]
    pub b_cols: Option<Vec<Vec<f64>>>,
    /// Default: Clenshaw–Curtis weights of the interior nodes.
    #[serde(default)]
    pub q_diag: Option<Vec<f64>>,
    /// Default: 0.1 on every actuator.
    #[serde(default)]
    pub r_diag: Option<Vec<f64>>,
    /// Optional box bounds; unconstrained when absent.
    #[serde(default)]
    pub u_min: Option<Vec<f64>>,
    #[serde(default)]
    pub u_max: Option<Vec<f64>>,
}

fn default_m() -> usize {
    2
}
fn default_nu() -> f64 {
    0.2
}
fn default_beta() -> f64 {
    1.0
}

impl BurgersConfig {
    pub fn with_size(n: usize) -> Self {
        Self {
            n,
            m: default_m(),
            nu: default_nu(),
            beta: default_beta(),
            alpha: None,
            b_cols: None,
            q_diag: None,
            r_diag: None,
            u_min: None,
            u_max: None,
        }
    }
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self::with_size(16)
    }
}

#[derive(Debug, Clone)]
pub struct BurgersModel {
    config: BurgersConfig,
    nodes: Vec<f64>,
    d1: DMatrix<f64>,
    d2: DMatrix<f64>,
    alpha: DVector<f64>,
    b: DMatrix<f64>,
    q_diag: DVector<f64>,
    r_diag: DVector<f64>,
    eq: EquilibriumPair,
    bounds: ControlBounds,
}

impl BurgersModel {
    pub fn new(config: BurgersConfig) -> Result<Self> {
        let n = config.n;
        let m = config.m;
        if n < 2 {
            return Err(Error::InvalidArgument(format!("Burgers needs n >= 2 interior nodes, got {n}")));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("Burgers needs at least one actuator".into()));
        }
        if !(config.nu > 0.0 && config.beta > 0.0) {
            return Err(Error::InvalidArgument("Burgers nu and beta must be positive".into()));
        }
        let degree = n + 1;
        let d_full = chebyshev_diff_matrix(degree)?;
        let d1 = interior(&d_full);
        let d2 = interior(&(&d_full * &d_full));
        let all_nodes = chebyshev_nodes(degree);
        let nodes: Vec<f64> = all_nodes[1..=n].to_vec();

        let alpha = match &config.alpha {
            Some(a) => {
                check_dim("alpha", a.len(), n)?;
                DVector::from_vec(a.clone())
            }
            None => DVector::from_iterator(n, nodes.iter().map(|x| 2.0 * (-9.0 * x * x).exp())),
        };
        let b = match &config.b_cols {
            Some(cols) => {
                check_dim("actuator columns", cols.len(), m)?;
                let mut b = DMatrix::zeros(n, m);
                for (j, c) in cols.iter().enumerate() {
                    check_dim("actuator profile", c.len(), n)?;
                    for i in 0..n {
                        b[(i, j)] = c[i];
                    }
                }
                b
            }
            None => {
                let centers: Vec<f64> = if m == 1 {
                    vec![0.0]
                } else {
                    (0..m).map(|j| -0.5 + j as f64 / (m - 1) as f64).collect()
                };
                DMatrix::from_fn(n, m, |i, j| {
                    let d = nodes[i] - centers[j];
                    (-d * d / 0.04).exp()
                })
            }
        };
        let q_diag = match &config.q_diag {
            Some(q) => {
                check_dim("q_diag", q.len(), n)?;
                DVector::from_vec(q.clone())
            }
            None => DVector::from_vec(clenshaw_curtis_weights(degree)[1..=n].to_vec()),
        };
        let r_diag = match &config.r_diag {
            Some(r) => {
                check_dim("r_diag", r.len(), m)?;
                DVector::from_vec(r.clone())
            }
            None => DVector::from_element(m, 0.1),
        };
        if q_diag.iter().any(|&q| q < 0.0) || r_diag.iter().any(|&r| r <= 0.0) {
            return Err(Error::InvalidArgument(
                "Burgers cost weights must be Q >= 0, R > 0".into(),
            ));
        }
        let bounds = match (&config.u_min, &config.u_max) {
            (Some(lo), Some(hi)) => {
                check_dim("u_min", lo.len(), m)?;
                ControlBounds::new(lo.clone(), hi.clone())?
            }
            (None, None) => ControlBounds::unbounded(m),
            _ => return Err(Error::InvalidArgument("give both u_min and u_max or neither".into())),
        };
        let eq = EquilibriumPair {
            x_f: DVector::zeros(n),
            u_f: DVector::zeros(m),
        };
        bounds.check_interior(eq.u_f.as_slice())?;
        Ok(Self {
            config,
            nodes,
            d1,
            d2,
            alpha,
            b,
            q_diag,
            r_diag,
            eq,
            bounds,
        })
    }

    pub fn config(&self) -> &BurgersConfig {
        &self.config
    }
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn diff1(&self) -> &DMatrix<f64> {
        &self.d1
    }
    pub fn diff2(&self) -> &DMatrix<f64> {
        &self.d2
    }
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }
    pub fn actuators(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl ControlSystem for BurgersModel {
    fn id(&self) -> String {
        format!("burgers-n{}-m{}", self.config.n, self.config.m)
    }
    fn state_dim(&self) -> usize {
        self.config.n
    }
    fn control_dim(&self) -> usize {
        self.config.m
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let sq = x.component_mul(x);
        let mut f = &self.d1 * sq * (-0.5);
        f.gemv(self.config.nu, &self.d2, x, 1.0);
        let beta = self.config.beta;
        for i in 0..x.len() {
            f[i] += self.alpha[i] * x[i] * (-beta * x[i]).exp();
        }
        f.gemv(1.0, &self.b, u, 1.0);
        f
    }

    fn cost_residual(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let m = u.len();
        DVector::from_iterator(
            n + m,
            x.iter()
                .zip(self.q_diag.iter())
                .map(|(x, q)| q.sqrt() * x)
                .chain(u.iter().zip(self.r_diag.iter()).map(|(u, r)| r.sqrt() * u)),
        )
    }

    fn equilibrium(&self) -> &EquilibriumPair {
        &self.eq
    }
    fn bounds(&self) -> &ControlBounds {
        &self.bounds
    }

    fn state_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut a = &self.d2 * self.config.nu;
        let beta = self.config.beta;
        for j in 0..n {
            for i in 0..n {
                a[(i, j)] -= self.d1[(i, j)] * x[j];
            }
            a[(j, j)] += self.alpha[j] * (1.0 - beta * x[j]) * (-beta * x[j]).exp();
        }
        a
    }

    fn control_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
    fn control_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
    fn constant_control_matrix(&self) -> bool {
        true
    }

    fn cost_weights(&self) -> CostQuadratic {
        CostQuadratic {
            q: DMatrix::from_diagonal(&self.q_diag),
            r: DMatrix::from_diagonal(&self.r_diag),
        }
    }

    fn cost_state_gradient(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        x.component_mul(&self.q_diag) * 2.0
    }

    fn collocation_nodes(&self) -> Option<Vec<f64>> {
        Some(self.nodes.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigenvalues, fd_jacobian};
    use crate::models::{dynamics_rhs, linearize};

    fn model() -> BurgersModel {
        BurgersModel::new(BurgersConfig::with_size(16)).unwrap()
    }

    #[test]
    fn origin_is_equilibrium() {
        let m = model();
        let f = dynamics_rhs(&m, &DVector::zeros(16), &DVector::zeros(2)).unwrap();
        assert_eq!(f.amax(), 0.0);
    }

    #[test]
    fn linearization_at_origin_is_diffusion_plus_reaction() {
        let m = model();
        let lin = linearize(&m, &DVector::zeros(16), &DVector::zeros(2)).unwrap();
        let mut expect = m.diff2() * m.config().nu;
        for i in 0..16 {
            expect[(i, i)] += m.alpha()[i];
        }
        assert!((lin.a - expect).amax() < 1e-14);
        assert_eq!(lin.b, *m.actuators());
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let m = model();
        let x = DVector::from_iterator(16, m.nodes().iter().map(|s| 0.7 * (2.0 * s).sin() - 0.3));
        let u = DVector::from_vec(vec![0.3, -0.2]);
        let a = m.state_jacobian(&x, &u);
        let fd = fd_jacobian(&x, 1e-6, |xp| m.rhs(xp, &u));
        for (ai, fi) in a.iter().zip(fd.iter()) {
            if ai.abs() > 1e-10 {
                assert!(((ai - fi) / ai).abs() < 1e-5, "{ai} vs {fi}");
            }
        }
    }

    #[test]
    fn default_configuration_is_open_loop_unstable() {
        let m = model();
        let a = m.state_jacobian(&DVector::zeros(16), &DVector::zeros(2));
        let abscissa = eigenvalues(&a).unwrap().iter().fold(f64::MIN, |a, e| a.max(e.0));
        assert!(abscissa > 0.0, "abscissa {abscissa}");
    }

    #[test]
    fn pure_diffusion_decays() {
        let cfg = BurgersConfig {
            alpha: Some(vec![0.0; 16]),
            ..BurgersConfig::with_size(16)
        };
        let m = BurgersModel::new(cfg).unwrap();
        // Slowest diffusion mode, found by brute-force power iteration on
        // (νD² + cI)⁻¹ is overkill; the sine profile is close enough to test
        // dissipativity.
        let x = DVector::from_iterator(16, m.nodes().iter().map(|s| 0.01 * (std::f64::consts::FRAC_PI_2 * (s + 1.0)).sin()));
        let f = m.rhs(&x, &DVector::zeros(2));
        let lin = m.diff2() * &x * m.config().nu;
        assert!(x.dot(&f) < 0.0);
        // Rayleigh quotient of νD² near −ν(π/2)².
        let rq = x.dot(&lin) / x.dot(&x);
        assert!((rq + 0.2 * std::f64::consts::FRAC_PI_2.powi(2)).abs() < 0.05, "rq {rq}");
    }

    #[test]
    fn cost_is_quadratic_sum() {
        let cfg = BurgersConfig {
            n: 2,
            m: 1,
            q_diag: Some(vec![1.0, 1.0]),
            r_diag: Some(vec![3.0]),
            alpha: None,
            b_cols: None,
            ..BurgersConfig::with_size(2)
        };
        let m = BurgersModel::new(cfg).unwrap();
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let u = DVector::from_vec(vec![1.0]);
        let l = crate::models::running_cost(&m, &x, &u).unwrap();
        assert!((l - 5.0).abs() < 1e-14);
    }
}
