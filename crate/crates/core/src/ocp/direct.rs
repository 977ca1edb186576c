//! Direct method: Hermite–Simpson transcription (node and midpoint controls)
//! solved with an augmented Lagrangian. The running cost is a sum of squared
//! residuals, so each inner problem is a bound-constrained nonlinear least
//! squares problem, handled by projected Levenberg–Marquardt steps on the
//! banded normal equations.

use nalgebra::{DMatrix, DVector};

use super::{interpolate, lqr_rollout, mesh, needs_extension, Diagnostics, ExtremalTrajectory, OcpSettings};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::BandMatrix;
use crate::lqr::{design_lqr, LqrSolution};
use crate::models::ControlSystem;

/// Layout of the decision vector: per node `[x_k (k > 0), u_k, ū_k (k < N−1)]`.
struct Layout {
    n: usize,
    m: usize,
    nodes: usize,
    start: Vec<usize>,
    len: usize,
}

impl Layout {
    fn new(n: usize, m: usize, nodes: usize) -> Self {
        let mut start = Vec::with_capacity(nodes);
        let mut off = 0;
        for k in 0..nodes {
            start.push(off);
            off += if k > 0 { n } else { 0 } + m + if k + 1 < nodes { m } else { 0 };
        }
        Self {
            n,
            m,
            nodes,
            start,
            len: off,
        }
    }

    fn x(&self, k: usize) -> Option<usize> {
        (k > 0).then(|| self.start[k])
    }

    fn u(&self, k: usize) -> usize {
        self.start[k] + if k > 0 { self.n } else { 0 }
    }

    fn um(&self, k: usize) -> usize {
        self.u(k) + self.m
    }

    fn block_width(&self) -> usize {
        self.n + 2 * self.m
    }
}

/// Node quantities reused by the interval terms.
struct NodeEval {
    x: DVector<f64>,
    u: DVector<f64>,
    f: DVector<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

/// Residual blocks with their local Jacobians and global column indices.
struct Block {
    rows: DVector<f64>,
    jac: DMatrix<f64>,
    cols: Vec<usize>,
}

struct Evaluation {
    cost: f64,
    defects: DVector<f64>,
    blocks: Vec<Block>,
    /// Which blocks hold defects (weighted later by the multiplier terms).
    defect_blocks: Vec<usize>,
}

pub struct DirectSolver<'a> {
    model: &'a dyn ControlSystem,
    lqr: LqrSolution,
    settings: OcpSettings,
}

impl<'a> DirectSolver<'a> {
    pub fn new(model: &'a dyn ControlSystem, settings: &OcpSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            model,
            lqr: design_lqr(model)?,
            settings: settings.clone(),
        })
    }

    pub fn with_lqr(model: &'a dyn ControlSystem, lqr: LqrSolution, settings: &OcpSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            model,
            lqr,
            settings: settings.clone(),
        })
    }

    fn unpack(&self, lay: &Layout, v: &DVector<f64>, x0: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let (n, m) = (lay.n, lay.m);
        let xs = (0..lay.nodes)
            .map(|k| match lay.x(k) {
                Some(i) => v.rows(i, n).clone_owned(),
                None => x0.clone(),
            })
            .collect();
        let us = (0..lay.nodes).map(|k| v.rows(lay.u(k), m).clone_owned()).collect();
        let ums = (0..lay.nodes - 1).map(|k| v.rows(lay.um(k), m).clone_owned()).collect();
        (xs, us, ums)
    }

    fn pack(&self, lay: &Layout, xs: &[DVector<f64>], us: &[DVector<f64>], ums: &[DVector<f64>]) -> DVector<f64> {
        let mut v = DVector::zeros(lay.len);
        for k in 0..lay.nodes {
            if let Some(i) = lay.x(k) {
                v.rows_mut(i, lay.n).copy_from(&xs[k]);
            }
            v.rows_mut(lay.u(k), lay.m).copy_from(&us[k]);
            if k + 1 < lay.nodes {
                v.rows_mut(lay.um(k), lay.m).copy_from(&ums[k]);
            }
        }
        v
    }

    /// Column indices of `(x_k, u_k)`; the fixed `x_0` maps to `None`.
    fn node_cols(&self, lay: &Layout, k: usize) -> Vec<Option<usize>> {
        let mut c: Vec<Option<usize>> = (0..lay.n).map(|i| lay.x(k).map(|s| s + i)).collect();
        c.extend((0..lay.m).map(|i| Some(lay.u(k) + i)));
        c
    }

    fn evaluate(&self, lay: &Layout, t: &[f64], v: &DVector<f64>, x0: &DVector<f64>, want_jac: bool) -> Evaluation {
        let model = self.model;
        let (n, m) = (lay.n, lay.m);
        let (xs, us, ums) = self.unpack(lay, v, x0);
        let nodes: Vec<NodeEval> = xs
            .iter()
            .zip(&us)
            .map(|(x, u)| NodeEval {
                f: model.rhs(x, u),
                a: if want_jac { model.state_jacobian(x, u) } else { DMatrix::zeros(0, 0) },
                b: if want_jac { model.control_jacobian(x, u) } else { DMatrix::zeros(0, 0) },
                x: x.clone(),
                u: u.clone(),
            })
            .collect();
        let nn = lay.nodes;
        let mut blocks = Vec::with_capacity(3 * nn);
        let mut defect_blocks = Vec::with_capacity(nn);
        let mut defects = DVector::zeros((nn - 1) * n);
        let mut cost = 0.0;
        let eye = DMatrix::<f64>::identity(n, n);

        // Node cost terms with trapezoid-like Simpson end weights.
        for k in 0..nn {
            let w = (if k > 0 { t[k] - t[k - 1] } else { 0.0 } + if k + 1 < nn { t[k + 1] - t[k] } else { 0.0 }) / 6.0;
            let sw = w.sqrt();
            let r = model.cost_residual(&nodes[k].x, &nodes[k].u) * sw;
            cost += r.norm_squared();
            let cols = self.node_cols(lay, k);
            let (jac, cols) = if want_jac {
                let (rx, ru) = model.cost_residual_jacobians(&nodes[k].x, &nodes[k].u);
                let mut j = DMatrix::zeros(r.len(), n + m);
                j.view_mut((0, 0), (r.len(), n)).copy_from(&(rx * sw));
                j.view_mut((0, n), (r.len(), m)).copy_from(&(ru * sw));
                compress(j, &cols)
            } else {
                (DMatrix::zeros(0, 0), Vec::new())
            };
            blocks.push(Block { rows: r, jac, cols });
        }

        for k in 0..nn - 1 {
            let h = t[k + 1] - t[k];
            let (na, nb) = (&nodes[k], &nodes[k + 1]);
            let xm = (&na.x + &nb.x) * 0.5 + (&na.f - &nb.f) * (h / 8.0);
            let um = &ums[k];
            let fm = model.rhs(&xm, um);
            let c = &nb.x - &na.x - (&na.f + &fm * 4.0 + &nb.f) * (h / 6.0);
            defects.rows_mut(k * n, n).copy_from(&c);
            let sw = (4.0 * h / 6.0).sqrt();
            let rm = model.cost_residual(&xm, um) * sw;
            cost += rm.norm_squared();

            // Local columns: x_k, u_k, x_{k+1}, u_{k+1}, ū_k.
            let mut cols = self.node_cols(lay, k);
            cols.extend(self.node_cols(lay, k + 1));
            cols.extend((0..m).map(|i| Some(lay.um(k) + i)));
            let width = 2 * (n + m) + m;
            if want_jac {
                let am = model.state_jacobian(&xm, um);
                let bm = model.control_jacobian(&xm, um);
                // ∂x_m / ∂(x_k, u_k, x_{k+1}, u_{k+1}, ū_k)
                let mut dxm = DMatrix::zeros(n, width);
                dxm.view_mut((0, 0), (n, n)).copy_from(&(&eye * 0.5 + &na.a * (h / 8.0)));
                dxm.view_mut((0, n), (n, m)).copy_from(&(&na.b * (h / 8.0)));
                dxm.view_mut((0, n + m), (n, n)).copy_from(&(&eye * 0.5 - &nb.a * (h / 8.0)));
                dxm.view_mut((0, 2 * n + m), (n, m)).copy_from(&(-&nb.b * (h / 8.0)));
                let mut dc = &am * &dxm * (-4.0 * h / 6.0);
                let mut add = |r0: usize, c0: usize, blk: &DMatrix<f64>| {
                    let mut view = dc.view_mut((r0, c0), blk.shape());
                    view += blk;
                };
                add(0, 0, &(-&eye - &na.a * (h / 6.0)));
                add(0, n, &(-&na.b * (h / 6.0)));
                add(0, n + m, &(&eye - &nb.a * (h / 6.0)));
                add(0, 2 * n + m, &(-&nb.b * (h / 6.0)));
                add(0, 2 * (n + m), &(-&bm * (4.0 * h / 6.0)));
                let (jd, cd) = compress(dc, &cols);
                defect_blocks.push(blocks.len());
                blocks.push(Block {
                    rows: c,
                    jac: jd,
                    cols: cd,
                });

                let (rx, ru) = model.cost_residual_jacobians(&xm, um);
                let mut jr = &rx * &dxm * sw;
                let mut view = jr.view_mut((0, 2 * (n + m)), (rm.len(), m));
                view += &ru * sw;
                let (jr, cr) = compress(jr, &cols);
                blocks.push(Block {
                    rows: rm,
                    jac: jr,
                    cols: cr,
                });
            } else {
                defect_blocks.push(blocks.len());
                blocks.push(Block {
                    rows: c,
                    jac: DMatrix::zeros(0, 0),
                    cols: Vec::new(),
                });
                blocks.push(Block {
                    rows: rm,
                    jac: DMatrix::zeros(0, 0),
                    cols: Vec::new(),
                });
            }
        }
        Evaluation {
            cost,
            defects,
            blocks,
            defect_blocks,
        }
    }

    /// Augmented Lagrangian value `J + νᵀc + μ/2 ‖c‖²`.
    fn merit(e: &Evaluation, nu: &DVector<f64>, mu: f64) -> f64 {
        e.cost + nu.dot(&e.defects) + 0.5 * mu * e.defects.norm_squared()
    }

    /// Gradient and Gauss–Newton normal matrix of the merit.
    fn normal_equations(&self, lay: &Layout, e: &Evaluation, nu: &DVector<f64>, mu: f64) -> (BandMatrix, DVector<f64>) {
        let w = 2 * lay.block_width();
        let mut h = BandMatrix::zeros(lay.len, w, w);
        let mut g = DVector::zeros(lay.len);
        let n = lay.n;
        let mut di = 0;
        for (bi, b) in e.blocks.iter().enumerate() {
            // Defect blocks enter as sqrt(μ/2)(c + ν/μ); the cost blocks as they are.
            let (rows, scale) = if e.defect_blocks.get(di) == Some(&bi) {
                let k = di;
                di += 1;
                let shifted = &b.rows + nu.rows(k * n, n) / mu;
                (shifted, (0.5 * mu).sqrt())
            } else {
                (b.rows.clone(), 1.0)
            };
            let jt_r = b.jac.transpose() * &rows * (scale * scale);
            let jt_j = b.jac.transpose() * &b.jac * (scale * scale);
            for (a, &ca) in b.cols.iter().enumerate() {
                g[ca] += 2.0 * jt_r[a];
                for (c, &cc) in b.cols.iter().enumerate() {
                    h.add(ca, cc, 2.0 * jt_j[(a, c)]);
                }
            }
        }
        (h, g)
    }

    fn bounds_of(&self, lay: &Layout) -> (Vec<f64>, Vec<f64>) {
        let bounds = self.model.bounds();
        let mut lo = vec![f64::NEG_INFINITY; lay.len];
        let mut hi = vec![f64::INFINITY; lay.len];
        for k in 0..lay.nodes {
            let mut set = |s: usize| {
                for i in 0..lay.m {
                    if bounds.bounded[i] {
                        lo[s + i] = bounds.u_min[i];
                        hi[s + i] = bounds.u_max[i];
                    }
                }
            };
            set(lay.u(k));
            if k + 1 < lay.nodes {
                set(lay.um(k));
            }
        }
        (lo, hi)
    }

    /// Bound-constrained minimization of the merit by projected LM steps.
    #[allow(clippy::too_many_arguments)]
    fn inner(
        &self,
        lay: &Layout,
        t: &[f64],
        x0: &DVector<f64>,
        mut v: DVector<f64>,
        nu: &DVector<f64>,
        mu: f64,
        tol: f64,
        iters: &mut usize,
    ) -> Result<DVector<f64>> {
        let (lo, hi) = self.bounds_of(lay);
        let mut damping = 1e-6;
        let mut e = self.evaluate(lay, t, &v, x0, true);
        let mut phi = Self::merit(&e, nu, mu);
        for _ in 0..self.settings.max_inner_iterations {
            *iters += 1;
            let (h, mut g) = self.normal_equations(lay, &e, nu, mu);
            // Freeze variables held at a bound by the gradient.
            let mut free = vec![true; lay.len];
            for i in 0..lay.len {
                let at_lo = v[i] <= lo[i] && g[i] > 0.0;
                let at_hi = v[i] >= hi[i] && g[i] < 0.0;
                if at_lo || at_hi {
                    free[i] = false;
                }
            }
            let pg = (0..lay.len).filter(|&i| free[i]).fold(0.0f64, |a, i| a.max(g[i].abs()));
            if pg <= tol * (1.0 + phi.abs()) {
                return Ok(v);
            }
            for i in 0..lay.len {
                if !free[i] {
                    g[i] = 0.0;
                }
            }
            let diag: Vec<f64> = (0..lay.len).map(|i| h.get(i, i)).collect();
            let mut improved = false;
            for _ in 0..40 {
                let Some(step) = bounded_step(&h, &g, &v, &lo, &hi, &free, damping, &diag) else {
                    damping *= 10.0;
                    continue;
                };
                let mut trial = &v + DVector::from_vec(step);
                for i in 0..lay.len {
                    trial[i] = trial[i].clamp(lo[i], hi[i]);
                }
                let et = self.evaluate(lay, t, &trial, x0, false);
                let pt = Self::merit(&et, nu, mu);
                if pt.is_finite() && pt < phi {
                    let rel = (phi - pt) / phi.abs().max(1e-300);
                    v = trial;
                    phi = pt;
                    damping = (damping / 3.0).max(1e-12);
                    improved = true;
                    if rel < 1e-15 {
                        return Ok(v);
                    }
                    break;
                }
                damping *= 4.0;
            }
            if !improved {
                // No descent at any damping: a stationary point to working precision.
                return Ok(v);
            }
            e = self.evaluate(lay, t, &v, x0, true);
        }
        Ok(v)
    }

    /// Augmented-Lagrangian solve on a fixed mesh.
    fn solve_mesh(&self, t: &[f64], x0: &DVector<f64>, v0: DVector<f64>, iters: &mut usize) -> Result<(DVector<f64>, Evaluation)> {
        let lay = Layout::new(self.model.state_dim(), self.model.control_dim(), t.len());
        let target = self.settings.direct_defect_tol;
        let mut nu = DVector::zeros((t.len() - 1) * lay.n);
        let mut mu = 1e2;
        let mut v = v0;
        let mut prev_c = f64::INFINITY;
        for _ in 0..self.settings.max_outer_iterations {
            let omega = (1e-2 * prev_c).clamp(1e-10, 1e-4);
            v = self.inner(&lay, t, x0, v, &nu, mu, omega, iters)?;
            let e = self.evaluate(&lay, t, &v, x0, false);
            if !e.cost.is_finite() {
                return Err(Error::NonFinite("direct transcription cost".into()));
            }
            let c = e.defects.amax();
            if c <= target {
                return Ok((v, e));
            }
            nu += &e.defects * mu;
            if c > 0.25 * prev_c {
                mu = (mu * 10.0).min(1e12);
            }
            prev_c = c;
        }
        let e = self.evaluate(&lay, t, &v, x0, false);
        Err(Error::NonConvergence(format!(
            "augmented Lagrangian stalled with defect {:e}",
            e.defects.amax()
        )))
    }

    fn guess(&self, t: &[f64], x0: &DVector<f64>, prev: Option<&ExtremalTrajectory>) -> DVector<f64> {
        let lay = Layout::new(self.model.state_dim(), self.model.control_dim(), t.len());
        let (mut xs, mut us) = (Vec::new(), Vec::new());
        let mut start = 0;
        let mut from = x0.clone();
        if let Some(p) = prev {
            let t_end = *p.t.last().expect("non-empty");
            start = t.partition_point(|s| *s <= t_end);
            for tk in &t[..start] {
                xs.push(interpolate(&p.t, &p.x, *tk));
                us.push(interpolate(&p.t, &p.u, *tk));
            }
            from = p.x.last().expect("non-empty").clone();
        }
        if start < t.len() {
            let origin = if start == 0 { 0.0 } else { t[start - 1] };
            let mut sub = vec![0.0];
            sub.extend(t[start..].iter().map(|s| s - origin));
            let (rx, ru) = lqr_rollout(self.model, &self.lqr, &from, &sub);
            let skip = if start == 0 { 0 } else { 1 };
            let take = t.len() - start;
            xs.extend(rx.into_iter().skip(skip).take(take));
            us.extend(ru.into_iter().skip(skip).take(take));
        }
        let ums: Vec<DVector<f64>> = (0..t.len() - 1).map(|k| (&us[k] + &us[k + 1]) * 0.5).collect();
        self.pack(&lay, &xs, &us, &ums)
    }

    pub fn solve(&self, x0: &DVector<f64>) -> Result<ExtremalTrajectory> {
        let model = self.model;
        let s = &self.settings;
        check_dim("initial state", x0.len(), model.state_dim())?;
        check_finite("initial state", x0.as_slice())?;
        model.validate_state(x0)?;
        let x_f = model.equilibrium().x_f.clone();
        let base = s.initial_horizon(model);
        let x0_dev = (x0 - &x_f).norm();
        if x0_dev == 0.0 {
            return Ok(ExtremalTrajectory::at_rest(model, base, s.nodes, false));
        }
        let mut horizon = base;
        let mut nodes = s.nodes;
        let mut prev: Option<ExtremalTrajectory> = None;
        let mut iterations = 0;
        for ext in 0..=s.max_extensions {
            let mut t = mesh::graded(horizon, base, nodes);
            let mut v = self.guess(&t, x0, prev.as_ref());
            let (v_sol, e) = loop {
                match self.solve_mesh(&t, x0, v.clone(), &mut iterations) {
                    Ok(r) => break r,
                    Err(err) if err.is_numerical() && nodes * 2 <= s.max_nodes => {
                        let lay = Layout::new(model.state_dim(), model.control_dim(), t.len());
                        let (xs, us, _) = self.unpack(&lay, &v, x0);
                        nodes *= 2;
                        let tn = mesh::graded(horizon, base, nodes);
                        let prev_mesh = ExtremalTrajectory {
                            t: t.clone(),
                            x: xs,
                            lam: None,
                            u: us,
                            cost: 0.0,
                            converged: false,
                            diagnostics: Diagnostics::default(),
                        };
                        // Re-seed on the finer mesh from the last iterate.
                        let lay_n = Layout::new(model.state_dim(), model.control_dim(), nodes);
                        let xs_n: Vec<_> = tn.iter().map(|s| interpolate(&prev_mesh.t, &prev_mesh.x, *s)).collect();
                        let us_n: Vec<_> = tn.iter().map(|s| interpolate(&prev_mesh.t, &prev_mesh.u, *s)).collect();
                        let ums_n: Vec<_> = (0..nodes - 1).map(|k| (&us_n[k] + &us_n[k + 1]) * 0.5).collect();
                        v = self.pack(&lay_n, &xs_n, &us_n, &ums_n);
                        t = tn;
                    }
                    Err(err) => return Err(err),
                }
            };
            let lay = Layout::new(model.state_dim(), model.control_dim(), t.len());
            let (xs, us, _) = self.unpack(&lay, &v_sol, x0);
            let xt_dev = (xs.last().expect("non-empty") - &x_f).norm();
            let (extend, change) = needs_extension(s, x0_dev, xt_dev, e.cost, prev.as_ref().map(|p| p.cost));
            let traj = ExtremalTrajectory {
                diagnostics: Diagnostics {
                    defect: e.defects.amax(),
                    horizon,
                    nodes: t.len(),
                    horizons_tried: ext as usize + 1,
                    iterations,
                    terminal_error: xt_dev,
                    cost_change: change,
                    ..Diagnostics::default()
                },
                t,
                x: xs,
                lam: None,
                u: us,
                cost: e.cost,
                converged: true,
            };
            if !extend {
                return Ok(traj);
            }
            prev = Some(traj);
            horizon *= s.growth;
        }
        Err(Error::NonConvergence(format!(
            "horizon cap {:.3e} reached before the trajectory settled",
            horizon / s.growth
        )))
    }
}

/// Drops columns of the fixed initial state.
fn compress(j: DMatrix<f64>, cols: &[Option<usize>]) -> (DMatrix<f64>, Vec<usize>) {
    let keep: Vec<usize> = (0..cols.len()).filter(|&c| cols[c].is_some()).collect();
    let out = DMatrix::from_fn(j.nrows(), keep.len(), |r, c| j[(r, keep[c])]);
    (out, keep.iter().map(|&c| cols[c].expect("kept")).collect())
}

/// Damped Gauss–Newton step with variables held by a bound removed. Variables
/// whose step would cross a bound are pinned to it and the reduced system is
/// solved again, a few passes at most.
#[allow(clippy::too_many_arguments)]
fn bounded_step(
    h: &BandMatrix,
    g: &DVector<f64>,
    v: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    free: &[bool],
    damping: f64,
    diag: &[f64],
) -> Option<Vec<f64>> {
    let n = free.len();
    let mut pinned: Vec<Option<f64>> = free.iter().map(|f| (!f).then_some(0.0)).collect();
    let mut step = Vec::new();
    for _ in 0..4 {
        let shift: Vec<f64> = pinned.iter().map(|p| p.unwrap_or(0.0)).collect();
        let coupling = h.mul_vec(&shift);
        let mut a = h.clone();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            match pinned[i] {
                Some(d) => rhs[i] = d,
                None => {
                    a.add(i, i, damping * diag[i].max(1e-8));
                    rhs[i] = -g[i] - coupling[i];
                }
            }
        }
        let is_free: Vec<bool> = pinned.iter().map(|p| p.is_none()).collect();
        clear_fixed(&mut a, &is_free);
        a.factor().ok()?.solve_in_place(&mut rhs);
        step = rhs;
        let mut changed = false;
        for i in 0..n {
            if pinned[i].is_none() {
                let target = v[i] + step[i];
                if target < lo[i] {
                    pinned[i] = Some(lo[i] - v[i]);
                    changed = true;
                } else if target > hi[i] {
                    pinned[i] = Some(hi[i] - v[i]);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Some(step)
}

/// Replaces rows and columns of fixed variables by the identity.
fn clear_fixed(a: &mut BandMatrix, free: &[bool]) {
    let (kl, ku) = a.bandwidths();
    let w = kl.max(ku);
    let n = free.len();
    for i in (0..n).filter(|&i| !free[i]) {
        for j in i.saturating_sub(w)..(i + w + 1).min(n) {
            if a.in_band(i, j) {
                a.set(i, j, 0.0);
            }
            if a.in_band(j, i) {
                a.set(j, i, 0.0);
            }
        }
        a.set(i, i, 1.0);
    }
}

/// Solves the transcribed problem from `x0` (design coordinates).
pub fn solve_open_loop_direct(
    model: &dyn ControlSystem,
    x0: &DVector<f64>,
    settings: &OcpSettings,
) -> Result<ExtremalTrajectory> {
    DirectSolver::new(model, settings)?.solve(x0)
}
