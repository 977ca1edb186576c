//! Linear-quadratic test systems `ẋ = Ax + Bu`, `L = xᵀQx + uᵀRu`.

use nalgebra::{DMatrix, DVector};

use super::{ControlBounds, ControlSystem, CostQuadratic, EquilibriumPair};
use crate::error::{check_dim, Error, Result};
use crate::linalg::symmetrize;

#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    q_half: DMatrix<f64>,
    r_half: DMatrix<f64>,
    eq: EquilibriumPair,
    bounds: ControlBounds,
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(Error::InvalidArgument(format!("{what} is not positive semidefinite")));
    }
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        check_dim("A columns", a.ncols(), n)?;
        check_dim("B rows", b.nrows(), n)?;
        check_dim("Q rows", q.nrows(), n)?;
        check_dim("Q columns", q.ncols(), n)?;
        check_dim("R rows", r.nrows(), m)?;
        check_dim("R columns", r.ncols(), m)?;
        let q_half = psd_sqrt(&q, "Q")?;
        let r_half = psd_sqrt(&r, "R")?;
        Ok(Self {
            a,
            b,
            q,
            r,
            q_half,
            r_half,
            eq: EquilibriumPair {
                x_f: DVector::zeros(n),
                u_f: DVector::zeros(m),
            },
            bounds: ControlBounds::unbounded(m),
        })
    }

    pub fn scalar(a: f64, b: f64, q: f64, r: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(b), m(q), m(r)).expect("valid scalar system")
    }

    /// `ẍ = u` with `Q = I`, `R = 1`.
    pub fn double_integrator() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
        )
        .expect("valid double integrator")
    }

    pub fn with_bounds(mut self, bounds: ControlBounds) -> Result<Self> {
        check_dim("bounds", bounds.dim(), self.b.ncols())?;
        bounds.check_interior(self.eq.u_f.as_slice())?;
        self.bounds = bounds;
        Ok(self)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl ControlSystem for LinearSystem {
    fn id(&self) -> String {
        format!("linear-n{}-m{}", self.a.nrows(), self.b.ncols())
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
    fn cost_residual(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let rx = &self.q_half * x;
        let ru = &self.r_half * u;
        DVector::from_iterator(rx.len() + ru.len(), rx.iter().chain(ru.iter()).copied())
    }
    fn equilibrium(&self) -> &EquilibriumPair {
        &self.eq
    }
    fn bounds(&self) -> &ControlBounds {
        &self.bounds
    }
    fn state_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
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
            q: self.q.clone(),
            r: self.r.clone(),
        }
    }
    fn cost_state_gradient(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        symmetrize(&self.q) * x * 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::running_cost;

    #[test]
    fn residual_reproduces_quadratic_cost() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let sys = LinearSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            q.clone(),
            DMatrix::from_element(1, 1, 3.0),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2]);
        let u = DVector::from_vec(vec![0.7]);
        let expect = (x.transpose() * &q * &x)[0] + 3.0 * 0.49;
        assert!((running_cost(&sys, &x, &u).unwrap() - expect).abs() < 1e-13);
    }

    #[test]
    fn rejects_indefinite_weights() {
        let m = |v| DMatrix::from_element(1, 1, v);
        assert!(LinearSystem::new(m(0.0), m(1.0), m(-1.0), m(1.0)).is_err());
    }
}
