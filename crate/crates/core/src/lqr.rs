//! Continuous-time algebraic Riccati equation and the LQR feedback law.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::{eigenvalues, invert, is_positive_definite, norm_inf, solve_lyapunov, symmetrize};
use crate::models::{cost_quadratic, linearize, ControlBounds, ControlSystem, EquilibriumPair};
use crate::policies::Policy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// `‖Q + AᵀP + PA − PBR⁻¹BᵀP‖∞`.
    pub riccati_residual: f64,
    /// Largest real part of the spectrum of `A − BK`.
    pub closed_loop_abscissa: f64,
}

/// Maximum real part of the eigenvalues of a square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().fold(f64::NEG_INFINITY, |a, e| a.max(e.0)))
}

pub fn riccati_residual(a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    norm_inf(&(q + a.transpose() * p + p * a - p * g * p))
}

/// Matrix sign function by the determinant-scaled Newton iteration.
fn matrix_sign(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    let mut z = h.clone();
    for _ in 0..200 {
        let zi = invert(&z, "Hamiltonian sign iterate")?;
        let det = z.clone().lu().determinant().abs();
        let c = if det.is_finite() && det > 0.0 {
            det.powf(1.0 / n as f64)
        } else {
            1.0
        };
        let next = (&z / c + &zi * c) * 0.5;
        let delta = norm_inf(&(&next - &z));
        z = next;
        if delta <= 1e-12 * norm_inf(&z) {
            return Ok(z);
        }
    }
    Err(Error::NonConvergence("Hamiltonian sign iteration did not settle".into()))
}

/// Stabilizing solution of `Q + AᵀP + PA − PBR⁻¹BᵀP = 0`.
///
/// The Hamiltonian sign function gives an initial solution, which Newton
/// steps then polish to working precision.
pub fn solve_riccati(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrSolution> {
    let n = a.nrows();
    let m = b.ncols();
    check_dim("A columns", a.ncols(), n)?;
    check_dim("B rows", b.nrows(), n)?;
    check_dim("Q", q.nrows() * q.ncols(), n * n)?;
    check_dim("R", r.nrows() * r.ncols(), m * m)?;
    for (what, mat) in [("A", a), ("B", b), ("Q", q), ("R", r)] {
        check_finite(what, mat.as_slice())?;
    }
    if !is_positive_definite(r) {
        return Err(Error::InvalidArgument("R must be positive definite".into()));
    }
    let q = symmetrize(q);
    let r_inv = invert(&symmetrize(r), "R")?;
    let g = symmetrize(&(b * &r_inv * b.transpose()));

    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-&q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let w = matrix_sign(&h)?;

    // [W12; W22 + I] P = −[W11 + I; W21]
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));
    let p0 = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::NonConvergence(format!("Riccati subspace extraction: {e}")))?;
    let mut p = symmetrize(&p0);
    let mut res = riccati_residual(a, &g, &q, &p);
    let tol = 1e-8 * (1.0 + norm_inf(&q));
    let mut history = vec![res];

    // Newton steps in defect-correction form: solve for the update against the
    // current residual, so Lyapunov solver error only scales the residual.
    for _ in 0..30 {
        if res <= 1e-3 * tol {
            break;
        }
        let acl = a - &g * &p;
        if spectral_abscissa(&acl)? >= 0.0 {
            break;
        }
        let defect = symmetrize(&(&q + a.transpose() * &p + &p * a - &p * &g * &p));
        let step = match solve_lyapunov(&acl, &defect) {
            Ok(x) => x,
            Err(_) => break,
        };
        let next = symmetrize(&(&p + step));
        let next_res = riccati_residual(a, &g, &q, &next);
        if !(next_res < res) {
            break;
        }
        let stalled = next_res > 0.5 * res;
        p = next;
        res = next_res;
        history.push(res);
        if stalled && res <= tol {
            break;
        }
    }

    let k = &r_inv * b.transpose() * &p;
    let abscissa = spectral_abscissa(&(a - b * &k))?;
    if !res.is_finite() || res > tol {
        return Err(Error::NonConvergence(format!(
            "Riccati residual {res:e} above {tol:e}; history {history:?}"
        )));
    }
    if !(abscissa < 0.0) {
        return Err(Error::Unstable(format!("A - BK has spectral abscissa {abscissa}")));
    }
    Ok(LqrSolution {
        p,
        k,
        riccati_residual: res,
        closed_loop_abscissa: abscissa,
    })
}

/// LQR design about the model's equilibrium with its quadratic cost weights.
pub fn design_lqr(model: &dyn ControlSystem) -> Result<LqrSolution> {
    let eq = model.equilibrium();
    let lin = linearize(model, &eq.x_f, &eq.u_f)?;
    let cq = cost_quadratic(model)?;
    solve_riccati(&lin.a, &lin.b, &cq.q, &cq.r)
}

/// `u = u_f − K(x − x_f)`, optionally clipped to the control box.
#[derive(Debug, Clone)]
pub struct LqrPolicy {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub eq: EquilibriumPair,
    pub bounds: Option<ControlBounds>,
}

pub fn lqr_policy(sol: &LqrSolution, eq: &EquilibriumPair) -> Result<LqrPolicy> {
    check_dim("gain columns", sol.k.ncols(), eq.x_f.len())?;
    check_dim("gain rows", sol.k.nrows(), eq.u_f.len())?;
    Ok(LqrPolicy {
        k: sol.k.clone(),
        p: sol.p.clone(),
        eq: eq.clone(),
        bounds: None,
    })
}

impl LqrPolicy {
    /// Same law with hard saturation onto `bounds`.
    pub fn saturated(mut self, bounds: &ControlBounds) -> Self {
        self.bounds = Some(bounds.clone());
        self
    }

    fn linear(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.eq.u_f - &self.k * (x - &self.eq.x_f)
    }

    /// `(x − x_f)ᵀ P (x − x_f)`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.eq.x_f;
        d.dot(&(&self.p * &d))
    }

    pub fn value_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.p * (x - &self.eq.x_f) * 2.0
    }
}

impl Policy for LqrPolicy {
    fn state_dim(&self) -> usize {
        self.k.ncols()
    }
    fn control_dim(&self) -> usize {
        self.k.nrows()
    }
    fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut u = self.linear(x);
        if let Some(b) = &self.bounds {
            b.clip(u.as_mut_slice());
        }
        u
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = -&self.k;
        if let Some(b) = &self.bounds {
            let mask = b.clip_mask(self.linear(x).as_slice());
            for (i, m) in mask.iter().enumerate() {
                if *m == 0.0 {
                    j.row_mut(i).fill(0.0);
                }
            }
        }
        j
    }
}
