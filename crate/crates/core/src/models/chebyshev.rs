//! Chebyshev–Gauss–Lobatto spectral collocation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Nodes `ξ_j = cos(jπ/n)`, `j = 0..=n`.
pub fn chebyshev_nodes(n: usize) -> Vec<f64> {
    (0..=n).map(|j| (j as f64 * PI / n as f64).cos()).collect()
}

/// First-order differentiation matrix on the `n + 1` Chebyshev–Lobatto nodes.
///
/// Diagonal entries use the negative-sum trick, so rows sum to zero exactly
/// and constants are differentiated to zero.
pub fn chebyshev_diff_matrix(n: usize) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "Chebyshev differentiation needs n >= 2, got {n}"
        )));
    }
    let xi = chebyshev_nodes(n);
    let c = |j: usize| {
        let s = if j.is_multiple_of(2) { 1.0 } else { -1.0 };
        if j == 0 || j == n {
            2.0 * s
        } else {
            s
        }
    };
    let mut d = DMatrix::zeros(n + 1, n + 1);
    for i in 0..=n {
        for j in 0..=n {
            if i != j {
                d[(i, j)] = c(i) / c(j) / (xi[i] - xi[j]);
            }
        }
    }
    for i in 0..=n {
        let s: f64 = (0..=n).filter(|&j| j != i).map(|j| d[(i, j)]).sum();
        d[(i, i)] = -s;
    }
    Ok(d)
}

/// Restriction of a full-grid operator to the interior nodes `1..n`
/// (homogeneous Dirichlet data at `ξ = ±1`).
pub fn interior(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() - 1;
    m.view((1, 1), (n - 1, n - 1)).into_owned()
}

/// Clenshaw–Curtis quadrature weights on the `n + 1` Lobatto nodes.
pub fn clenshaw_curtis_weights(n: usize) -> Vec<f64> {
    let theta: Vec<f64> = (0..=n).map(|j| j as f64 * PI / n as f64).collect();
    let mut w = vec![0.0; n + 1];
    let interior_idx = 1..n;
    let mut v = vec![1.0; n.saturating_sub(1)];
    if n.is_multiple_of(2) {
        w[0] = 1.0 / ((n * n) as f64 - 1.0);
        w[n] = w[0];
        for k in 1..n / 2 {
            for (vi, i) in v.iter_mut().zip(interior_idx.clone()) {
                *vi -= 2.0 * (2.0 * k as f64 * theta[i]).cos() / (4.0 * (k * k) as f64 - 1.0);
            }
        }
        for (vi, i) in v.iter_mut().zip(interior_idx.clone()) {
            *vi -= (n as f64 * theta[i]).cos() / ((n * n) as f64 - 1.0);
        }
    } else {
        w[0] = 1.0 / (n * n) as f64;
        w[n] = w[0];
        for k in 1..=(n - 1) / 2 {
            for (vi, i) in v.iter_mut().zip(interior_idx.clone()) {
                *vi -= 2.0 * (2.0 * k as f64 * theta[i]).cos() / (4.0 * (k * k) as f64 - 1.0);
            }
        }
    }
    for (vi, i) in v.iter().zip(interior_idx) {
        w[i] = 2.0 * vi / n as f64;
    }
    w
}

pub fn sample(nodes: &[f64], f: impl Fn(f64) -> f64) -> DVector<f64> {
    DVector::from_iterator(nodes.len(), nodes.iter().map(|&x| f(x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_n() {
        assert!(chebyshev_diff_matrix(1).is_err());
        assert!(chebyshev_diff_matrix(2).is_ok());
    }

    #[test]
    fn differentiates_constants_and_linears() {
        let n = 9;
        let d = chebyshev_diff_matrix(n).unwrap();
        let xi = chebyshev_nodes(n);
        let ones = DVector::from_element(n + 1, 1.0);
        assert!((&d * ones).amax() < 1e-12);
        let lin = sample(&xi, |x| x);
        assert!((&d * lin).add_scalar(-1.0).amax() < 1e-12);
    }

    #[test]
    fn differentiates_quadratic() {
        for n in [4, 8, 16] {
            let d = chebyshev_diff_matrix(n).unwrap();
            let xi = chebyshev_nodes(n);
            let err = (&d * sample(&xi, |x| x * x) - sample(&xi, |x| 2.0 * x)).amax();
            assert!(err < 1e-10, "n={n} err={err}");
        }
    }

    #[test]
    fn second_derivative_of_sine_is_spectrally_accurate() {
        let n = 16;
        let d = chebyshev_diff_matrix(n).unwrap();
        let d2 = &d * &d;
        let xi = chebyshev_nodes(n);
        let f = sample(&xi, |x| (PI * x).sin());
        let exact = sample(&xi, |x| -PI * PI * (PI * x).sin());
        assert!((d2 * f - exact).amax() < 1e-6);
    }

    #[test]
    fn clenshaw_curtis_integrates_polynomials() {
        for n in [6, 7, 16] {
            let w = clenshaw_curtis_weights(n);
            let xi = chebyshev_nodes(n);
            let total: f64 = w.iter().sum();
            assert!((total - 2.0).abs() < 1e-13);
            let x4: f64 = w.iter().zip(&xi).map(|(w, x)| w * x.powi(4)).sum();
            assert!((x4 - 0.4).abs() < 1e-13);
        }
    }
}
