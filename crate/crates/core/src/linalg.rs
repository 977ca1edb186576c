//! Dense and banded linear algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Induced infinity norm (maximum absolute row sum).
pub fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest absolute entry of a vector or matrix slice.
pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols() && symmetrize(m).cholesky().is_some()
}

pub fn invert(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::NonConvergence(format!("{what} is singular")))
}

/// Eigenvalues (real, imaginary) of a real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "eigenvalues of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("eigenvalue input".into()));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), 1e-15, 100_000)
        .ok_or_else(|| Error::NonConvergence("Schur iteration".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect())
}

/// Solves `Aᵀ X + X A + C = 0` by Bartels–Stewart on the real Schur form of
/// `A`. Fails when `A` and `−A` share an eigenvalue.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || c.nrows() != n || c.ncols() != n {
        return Err(Error::Dimension("Lyapunov operands must be square and matching".into()));
    }
    if !a.iter().chain(c.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("Lyapunov input".into()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (u, t) = nalgebra::linalg::Schur::try_new(a.clone(), 1e-15, 100_000)
        .ok_or_else(|| Error::NonConvergence("Schur iteration".into()))?
        .unpack();
    // Diagonal blocks of the quasi-triangular factor: (start, size).
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        let size = if i + 1 < n && t[(i + 1, i)] != 0.0 { 2 } else { 1 };
        blocks.push((i, size));
        i += size;
    }
    let f = u.transpose() * c * &u;
    let mut y = DMatrix::<f64>::zeros(n, n);
    for &(ri, si) in &blocks {
        for &(cj, sj) in &blocks {
            // Tᵢᵢᵀ Yᵢⱼ + Yᵢⱼ Tⱼⱼ = −Fᵢⱼ − Σ_{k<i} Tₖᵢᵀ Yₖⱼ − Σ_{k<j} Yᵢₖ Tₖⱼ
            let mut rhs = -f.view((ri, cj), (si, sj)).clone_owned();
            if ri > 0 {
                rhs -= t.view((0, ri), (ri, si)).transpose() * y.view((0, cj), (ri, sj));
            }
            if cj > 0 {
                rhs -= y.view((ri, 0), (si, cj)) * t.view((0, cj), (cj, sj));
            }
            let tii = t.view((ri, ri), (si, si));
            let tjj = t.view((cj, cj), (sj, sj));
            let k = si * sj;
            // Column-major vec: vec(TᵢᵢᵀY) = (I ⊗ Tᵢᵢᵀ) vec Y, vec(Y Tⱼⱼ) = (Tⱼⱼᵀ ⊗ I) vec Y.
            let mut sys = DMatrix::<f64>::zeros(k, k);
            for q in 0..sj {
                for p in 0..si {
                    let row = q * si + p;
                    for p2 in 0..si {
                        sys[(row, q * si + p2)] += tii[(p2, p)];
                    }
                    for q2 in 0..sj {
                        sys[(row, q2 * si + p)] += tjj[(q2, q)];
                    }
                }
            }
            let sol = sys
                .lu()
                .solve(&DVector::from_column_slice(rhs.as_slice()))
                .ok_or_else(|| Error::NonConvergence("Lyapunov operator is singular".into()))?;
            for q in 0..sj {
                for p in 0..si {
                    y[(ri + p, cj + q)] = sol[q * si + p];
                }
            }
        }
    }
    let x = &u * y * u.transpose();
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("Lyapunov solution".into()));
    }
    Ok(x)
}

/// A square band matrix in LAPACK `gb` layout with room for the fill-in that
/// partial pivoting produces.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ld = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ld,
            data: vec![0.0; ld * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        (self.kl + self.ku + i - j) + j * self.ld
    }

    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && i <= j + self.kl && j <= i + self.ku
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            self.in_band(i, j),
            "entry ({i},{j}) outside band kl={} ku={}",
            self.kl,
            self.ku
        );
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "entry ({i},{j}) outside band");
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.idx(i, j)]
        } else {
            0.0
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (i, yi) in y.iter_mut().enumerate() {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            for (j, xj) in x.iter().enumerate().take(hi + 1).skip(lo) {
                *yi += self.data[self.idx(i, j)] * xj;
            }
        }
        y
    }

    /// LU factorization with partial pivoting (unblocked `gbtf2`).
    pub fn factor(mut self) -> Result<BandLu> {
        let n = self.n;
        let kl = self.kl;
        let kv = self.ku + self.kl;
        let mut piv = vec![0usize; n];
        let mut ju = 0usize;
        for k in 0..n {
            let km = kl.min(n - 1 - k);
            let mut p = k;
            let mut best = self.data[self.idx(k, k)].abs();
            for i in k + 1..=k + km {
                let v = self.data[self.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            piv[k] = p;
            if best == 0.0 || !best.is_finite() {
                return Err(Error::NonConvergence(format!(
                    "singular band matrix at column {k}"
                )));
            }
            ju = ju.max((k + self.ku + p - k).min(n - 1));
            if p != k {
                for j in k..=ju {
                    let a = self.idx(k, j);
                    let b = self.idx(p, j);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.idx(k, k)];
            for i in k + 1..=k + km {
                let id = self.idx(i, k);
                self.data[id] /= pivot;
            }
            for j in k + 1..=ju {
                let akj = self.data[self.idx(k, j)];
                if akj != 0.0 {
                    for i in k + 1..=k + km {
                        let lik = self.data[self.idx(i, k)];
                        let id = self.idx(i, j);
                        self.data[id] -= lik * akj;
                    }
                }
            }
        }
        Ok(BandLu {
            band: self,
            piv,
            kv,
        })
    }
}

/// Factorization produced by [`BandMatrix::factor`].
#[derive(Debug, Clone)]
pub struct BandLu {
    band: BandMatrix,
    piv: Vec<usize>,
    kv: usize,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let a = &self.band;
        let n = a.n;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let km = a.kl.min(n - 1 - k);
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=k + km {
                    b[i] -= a.data[a.idx(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let hi = (k + self.kv).min(n - 1);
            let mut s = b[k];
            for (j, bj) in b.iter().enumerate().take(hi + 1).skip(k + 1) {
                s -= a.data[a.idx(k, j)] * bj;
            }
            b[k] = s / a.data[a.idx(k, k)];
        }
    }
}

/// Central-difference Jacobian of `f` at `x` with per-coordinate relative steps.
pub fn fd_jacobian<F>(x: &DVector<f64>, rel_step: f64, mut f: F) -> DMatrix<f64>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut xp = x.clone();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let h = rel_step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        cols.push((fp - fm) / (2.0 * h));
    }
    if cols.is_empty() {
        let m = f(x).len();
        return DMatrix::zeros(m, 0);
    }
    DMatrix::from_columns(&cols)
}
