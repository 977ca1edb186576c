//! Indirect method: Hermite–Simpson collocation of the state–costate boundary
//! value problem `x(0) = x₀`, `λ(T) = 0`, solved by damped Newton on the banded
//! collocation system, with horizon doubling toward the infinite-horizon limit.

use nalgebra::{DMatrix, DVector};

use super::{interpolate, lqr_rollout, mesh, needs_extension, Diagnostics, ExtremalTrajectory, OcpSettings, Pmp};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::BandMatrix;
use crate::lqr::{design_lqr, LqrSolution};
use crate::models::ControlSystem;

/// Reusable solver for one model: caches the LQR solution used for initial guesses.
pub struct IndirectSolver<'a> {
    pmp: Pmp<'a>,
    lqr: LqrSolution,
    settings: OcpSettings,
}

struct Collocation {
    /// Residual: initial condition, interval defects, terminal condition.
    res: DVector<f64>,
    nodes_f: Vec<DVector<f64>>,
    mids: Vec<DVector<f64>>,
    mids_f: Vec<DVector<f64>>,
}

impl<'a> IndirectSolver<'a> {
    pub fn new(model: &'a dyn ControlSystem, settings: &OcpSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            pmp: Pmp::new(model)?,
            lqr: design_lqr(model)?,
            settings: settings.clone(),
        })
    }

    pub fn with_lqr(model: &'a dyn ControlSystem, lqr: LqrSolution, settings: &OcpSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            pmp: Pmp::new(model)?,
            lqr,
            settings: settings.clone(),
        })
    }

    fn model(&self) -> &dyn ControlSystem {
        self.pmp.model
    }

    fn pack(&self, x: &DVector<f64>, lam: &DVector<f64>) -> DVector<f64> {
        let n = self.pmp.n;
        let mut y = DVector::zeros(2 * n);
        y.rows_mut(0, n).copy_from(x);
        y.rows_mut(n, n).copy_from(lam);
        y
    }

    fn split(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.pmp.n;
        (y.rows(0, n).clone_owned(), y.rows(n, n).clone_owned())
    }

    fn node(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        let d = 2 * self.pmp.n;
        z.rows(k * d, d).clone_owned()
    }

    fn collocate(&self, t: &[f64], z: &DVector<f64>, x0: &DVector<f64>) -> Collocation {
        let n = self.pmp.n;
        let d = 2 * n;
        let nn = t.len();
        let ys: Vec<DVector<f64>> = (0..nn).map(|k| self.node(z, k)).collect();
        let fs: Vec<DVector<f64>> = ys.iter().map(|y| self.pmp.field(y)).collect();
        let mut res = DVector::zeros(nn * d);
        res.rows_mut(0, n).copy_from(&(ys[0].rows(0, n) - x0));
        let mut mids = Vec::with_capacity(nn - 1);
        let mut mids_f = Vec::with_capacity(nn - 1);
        for k in 0..nn - 1 {
            let h = t[k + 1] - t[k];
            let ym = (&ys[k] + &ys[k + 1]) * 0.5 + (&fs[k] - &fs[k + 1]) * (h / 8.0);
            let fm = self.pmp.field(&ym);
            let defect = &ys[k + 1] - &ys[k] - (&fs[k] + &fm * 4.0 + &fs[k + 1]) * (h / 6.0);
            res.rows_mut(n + k * d, d).copy_from(&defect);
            mids.push(ym);
            mids_f.push(fm);
        }
        res.rows_mut(n + (nn - 1) * d, n).copy_from(&ys[nn - 1].rows(n, n));
        Collocation {
            res,
            nodes_f: fs,
            mids,
            mids_f,
        }
    }

    fn jacobian(&self, t: &[f64], z: &DVector<f64>, c: &Collocation) -> BandMatrix {
        let n = self.pmp.n;
        let d = 2 * n;
        let nn = t.len();
        let w = 3 * n;
        let mut jac = BandMatrix::zeros(nn * d, w, w);
        for i in 0..n {
            jac.add(i, i, 1.0);
            jac.add(n + (nn - 1) * d + i, (nn - 1) * d + n + i, 1.0);
        }
        let js: Vec<DMatrix<f64>> = (0..nn)
            .map(|k| self.pmp.field_jacobian(&self.node(z, k), &c.nodes_f[k]))
            .collect();
        let eye = DMatrix::<f64>::identity(d, d);
        for k in 0..nn - 1 {
            let h = t[k + 1] - t[k];
            let jm = self.pmp.field_jacobian(&c.mids[k], &c.mids_f[k]);
            let dm_a = &eye * 0.5 + &js[k] * (h / 8.0);
            let dm_b = &eye * 0.5 - &js[k + 1] * (h / 8.0);
            let da = -&eye - (&js[k] + &jm * dm_a * 4.0) * (h / 6.0);
            let db = &eye - (&js[k + 1] + &jm * dm_b * 4.0) * (h / 6.0);
            let row = n + k * d;
            for i in 0..d {
                for j in 0..d {
                    jac.add(row + i, k * d + j, da[(i, j)]);
                    jac.add(row + i, (k + 1) * d + j, db[(i, j)]);
                }
            }
        }
        jac
    }

    /// Damped Newton on one mesh. Returns the solution and iteration count.
    fn newton(&self, t: &[f64], mut z: DVector<f64>, x0: &DVector<f64>) -> Result<(DVector<f64>, Collocation, usize)> {
        let s = &self.settings;
        let mut c = self.collocate(t, &z, x0);
        for it in 0..s.max_newton_iterations {
            let norm = c.res.norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite("collocation residual".into()));
            }
            if c.res.amax() <= s.defect_tol {
                return Ok((z, c, it));
            }
            let lu = self.jacobian(t, &z, &c).factor()?;
            let mut step: Vec<f64> = c.res.iter().map(|v| -v).collect();
            lu.solve_in_place(&mut step);
            let step = DVector::from_vec(step);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=s.max_halvings {
                let trial = &z + &step * alpha;
                let ct = self.collocate(t, &trial, x0);
                let tn = ct.res.norm();
                if tn.is_finite() && tn <= (1.0 - 1e-4 * alpha) * norm {
                    accepted = Some((trial, ct));
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((zn, cn)) => {
                    z = zn;
                    c = cn;
                }
                None => {
                    return Err(Error::NonConvergence(format!(
                        "Newton stalled at maximum damping (residual {:e})",
                        c.res.amax()
                    )))
                }
            }
        }
        if c.res.amax() <= s.defect_tol {
            let it = s.max_newton_iterations;
            return Ok((z, c, it));
        }
        Err(Error::NonConvergence(format!(
            "Newton iteration limit reached (residual {:e})",
            c.res.amax()
        )))
    }

    /// Initial guess on mesh `t`: the previous solution where it exists, then
    /// an LQR rollout with `λ = 2P(x − x_f)`.
    fn guess(&self, t: &[f64], x0: &DVector<f64>, prev: Option<(&[f64], &[DVector<f64>])>) -> DVector<f64> {
        let d = 2 * self.pmp.n;
        let x_f = &self.model().equilibrium().x_f;
        let mut z = DVector::zeros(t.len() * d);
        let (start, from) = match prev {
            Some((tp, yp)) => {
                let t_end = *tp.last().expect("non-empty mesh");
                let cut = t.partition_point(|s| *s <= t_end);
                for (k, tk) in t.iter().enumerate().take(cut) {
                    z.rows_mut(k * d, d).copy_from(&interpolate(tp, yp, *tk));
                }
                let x_end = self.split(yp.last().expect("non-empty")).0;
                (cut, x_end)
            }
            None => (0, x0.clone()),
        };
        if start < t.len() {
            let origin = if start == 0 { 0.0 } else { t[start - 1] };
            let mut sub = vec![0.0];
            sub.extend(t[start..].iter().map(|s| s - origin));
            let (xs, _) = lqr_rollout(self.model(), &self.lqr, &from, &sub);
            for (k, x) in xs.iter().skip(1).enumerate() {
                let lam = &self.lqr.p * (x - x_f) * 2.0;
                z.rows_mut((start + k) * d, d).copy_from(&self.pack(x, &lam));
            }
            if start == 0 {
                let lam = &self.lqr.p * (x0 - x_f) * 2.0;
                z.rows_mut(0, d).copy_from(&self.pack(x0, &lam));
            }
        }
        z
    }

    pub fn solve(&self, x0: &DVector<f64>) -> Result<ExtremalTrajectory> {
        let model = self.model();
        let s = &self.settings;
        let n = self.pmp.n;
        check_dim("initial state", x0.len(), n)?;
        check_finite("initial state", x0.as_slice())?;
        model.validate_state(x0)?;
        let x_f = model.equilibrium().x_f.clone();
        let base = s.initial_horizon(model);
        let x0_dev = (x0 - &x_f).norm();
        if x0_dev == 0.0 {
            return Ok(ExtremalTrajectory::at_rest(model, base, s.nodes, true));
        }
        let mut horizon = base;
        let mut nodes = s.nodes;
        let mut prev: Option<(Vec<f64>, Vec<DVector<f64>>)> = None;
        let mut prev_cost = None;
        let mut iterations = 0;
        for ext in 0..=s.max_extensions {
            let mut t = mesh::graded(horizon, base, nodes);
            let mut z = self.guess(&t, x0, prev.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())));
            let (z_sol, coll, h_drift, h_max) = loop {
                let attempt = self.newton(&t, z.clone(), x0);
                match attempt {
                    Ok((zs, c, its)) => {
                        iterations += its;
                        let (drift, hmax) = self.hamiltonian_drift(&t, &zs);
                        let h0 = self.hamiltonian_at(&zs, 0).abs();
                        if drift <= s.hamiltonian_tol * (1.0 + h0) || nodes * 2 > s.max_nodes {
                            break (zs, c, drift, hmax);
                        }
                        z = self.remesh(&t, &zs, horizon, base, nodes * 2);
                    }
                    Err(e) if e.is_numerical() && nodes * 2 <= s.max_nodes => {
                        z = self.remesh(&t, &z, horizon, base, nodes * 2);
                    }
                    Err(e) => return Err(e),
                }
                nodes *= 2;
                t = mesh::graded(horizon, base, nodes);
            };
            let ys: Vec<DVector<f64>> = (0..t.len()).map(|k| self.node(&z_sol, k)).collect();
            let cost = self.cost(&t, &ys, &coll);
            let xt_dev = (self.split(ys.last().expect("non-empty")).0 - &x_f).norm();
            let (extend, change) = needs_extension(s, x0_dev, xt_dev, cost, prev_cost);
            if !extend {
                let h0 = self.hamiltonian_at(&z_sol, 0).abs();
                let stationarity = ys
                    .iter()
                    .map(|y| {
                        let (x, l) = self.split(y);
                        self.pmp.stationarity(&x, &l)
                    })
                    .fold(0.0, f64::max);
                let (xs, lams): (Vec<_>, Vec<_>) = ys.iter().map(|y| self.split(y)).unzip();
                let us = xs.iter().zip(&lams).map(|(x, l)| self.pmp.control(x, l)).collect();
                return Ok(ExtremalTrajectory {
                    converged: h_drift <= s.hamiltonian_tol * (1.0 + h0),
                    diagnostics: Diagnostics {
                        defect: coll.res.amax(),
                        hamiltonian_drift: h_drift,
                        hamiltonian_max: h_max,
                        stationarity,
                        horizon,
                        nodes: t.len(),
                        horizons_tried: ext as usize + 1,
                        iterations,
                        terminal_error: xt_dev,
                        cost_change: change,
                    },
                    t,
                    x: xs,
                    lam: Some(lams),
                    u: us,
                    cost,
                });
            }
            prev_cost = Some(cost);
            prev = Some((t, ys));
            horizon *= s.growth;
        }
        Err(Error::NonConvergence(format!(
            "horizon cap {:.3e} reached before the trajectory settled",
            horizon / s.growth
        )))
    }

    fn remesh(&self, t: &[f64], z: &DVector<f64>, horizon: f64, base: f64, nodes: usize) -> DVector<f64> {
        let d = 2 * self.pmp.n;
        let ys: Vec<DVector<f64>> = (0..t.len()).map(|k| self.node(z, k)).collect();
        let tn = mesh::graded(horizon, base, nodes);
        let mut out = DVector::zeros(nodes * d);
        for (k, tk) in tn.iter().enumerate() {
            out.rows_mut(k * d, d).copy_from(&interpolate(t, &ys, *tk));
        }
        out
    }

    fn hamiltonian_at(&self, z: &DVector<f64>, k: usize) -> f64 {
        let (x, l) = self.split(&self.node(z, k));
        self.pmp.hamiltonian(&x, &l)
    }

    fn hamiltonian_drift(&self, t: &[f64], z: &DVector<f64>) -> (f64, f64) {
        let h0 = self.hamiltonian_at(z, 0);
        let mut drift = 0.0f64;
        let mut hmax = h0.abs();
        for k in 1..t.len() {
            let h = self.hamiltonian_at(z, k);
            drift = drift.max((h - h0).abs());
            hmax = hmax.max(h.abs());
        }
        (drift, hmax)
    }

    /// Simpson quadrature of the running cost with the collocation midpoints.
    fn cost(&self, t: &[f64], ys: &[DVector<f64>], c: &Collocation) -> f64 {
        let l = |y: &DVector<f64>| {
            let (x, lam) = self.split(y);
            let u = self.pmp.control(&x, &lam);
            self.model().cost_residual(&x, &u).norm_squared()
        };
        let ln: Vec<f64> = ys.iter().map(l).collect();
        (0..t.len() - 1)
            .map(|k| (t[k + 1] - t[k]) / 6.0 * (ln[k] + 4.0 * l(&c.mids[k]) + ln[k + 1]))
            .sum()
    }
}

/// Solves the Pontryagin boundary value problem from `x0` (design coordinates).
pub fn solve_open_loop_indirect(
    model: &dyn ControlSystem,
    x0: &DVector<f64>,
    settings: &OcpSettings,
) -> Result<ExtremalTrajectory> {
    IndirectSolver::new(model, settings)?.solve(x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{design_model, BurgersConfig, BurgersModel, LinearSystem};
    use std::sync::Arc;

    #[test]
    fn at_equilibrium_is_trivial() {
        let sys = LinearSystem::double_integrator();
        let traj = solve_open_loop_indirect(&sys, &DVector::zeros(2), &OcpSettings::default()).unwrap();
        assert_eq!(traj.cost, 0.0);
        assert!(traj.converged);
        assert!(traj.x.iter().all(|x| x.amax() == 0.0));
    }

    #[test]
    fn double_integrator_matches_riccati() {
        let sys = LinearSystem::double_integrator();
        let lqr = design_lqr(&sys).unwrap();
        for x0 in [DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![-0.7, 1.3])] {
            let traj = solve_open_loop_indirect(&sys, &x0, &OcpSettings::default()).unwrap();
            assert!(traj.converged, "{:?}", traj.diagnostics);
            let lam0 = &traj.lam.as_ref().unwrap()[0];
            let want = &lqr.p * &x0 * 2.0;
            assert!((lam0 - &want).norm() <= 1e-3 * want.norm(), "{lam0} vs {want}");
            let v = x0.dot(&(&lqr.p * &x0));
            assert!((traj.cost - v).abs() <= 1e-3 * v);
            let d = &traj.diagnostics;
            assert!(d.hamiltonian_drift <= 1e-5 && d.hamiltonian_max <= 1e-4, "{d:?}");
            assert!(d.stationarity <= 1e-6);
            assert!(traj.t.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn burgers_extremal_is_consistent() {
        let full: Arc<dyn ControlSystem> = Arc::new(BurgersModel::new(BurgersConfig::with_size(8)).unwrap());
        let model = design_model(&full);
        let x0 = DVector::from_fn(8, |i, _| {
            let xi = (std::f64::consts::PI * (i + 1) as f64 / 9.0).cos();
            1.2 * (std::f64::consts::PI * (xi + 1.0) / 2.0).sin()
        });
        let traj = solve_open_loop_indirect(&*model, &x0, &OcpSettings::default()).unwrap();
        let d = &traj.diagnostics;
        assert!(traj.converged, "{d:?}");
        let h0 = d.hamiltonian_max;
        assert!(d.hamiltonian_drift <= 1e-5 * (1.0 + h0));
        assert!(d.stationarity <= 1e-6);
        assert!(d.terminal_error <= 1e-3 * x0.norm());
        assert!(traj.cost > 0.0);
    }

    #[test]
    fn cost_is_nondecreasing_in_horizon() {
        let sys = LinearSystem::scalar(0.5, 1.0, 1.0, 1.0);
        let x0 = DVector::from_vec(vec![1.0]);
        let mut costs = Vec::new();
        for h in [0.5, 1.0, 2.0, 4.0] {
            let s = OcpSettings {
                horizon: Some(h),
                max_extensions: 0,
                cost_change_tol: f64::INFINITY,
                terminal_tol: f64::INFINITY,
                ..OcpSettings::default()
            };
            costs.push(solve_open_loop_indirect(&sys, &x0, &s).unwrap().cost);
        }
        assert!(costs.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{costs:?}");
    }
}
