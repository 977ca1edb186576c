//! First-order and quasi-Newton optimizers over a flat parameter vector.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsSettings {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once the loss changed by less than this fraction over `window` iterations.
    pub rel_tol: f64,
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 5000,
            rel_tol: 1e-9,
            window: 10,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub theta: Vec<f64>,
    pub loss: f64,
    /// Loss after every accepted step, starting with the initial loss.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// Why the iteration ended.
    pub stop: String,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

/// Limited-memory BFGS with a strong-Wolfe line search. `f` returns the loss
/// and its gradient; a non-finite loss counts as a failed trial point.
pub fn lbfgs<F>(theta0: Vec<f64>, settings: &LbfgsSettings, mut f: F) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut theta = theta0;
    let (mut loss, mut grad) = f(&theta)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("initial training loss".into()));
    }
    let mut history = vec![loss];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut stop = "iteration limit".to_string();
    let mut it = 0;
    while it < settings.max_iterations {
        let gnorm = dot(&grad, &grad).sqrt();
        if gnorm == 0.0 {
            stop = "zero gradient".into();
            break;
        }
        // Two-loop recursion.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match mem.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / gnorm,
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &d);
        if slope >= 0.0 {
            mem.clear();
            d = grad.iter().map(|g| -g / gnorm).collect();
            slope = dot(&grad, &d);
        }
        let Some((step, new_loss, new_grad)) = wolfe_search(&theta, loss, slope, &d, settings, &mut f)? else {
            if mem.is_empty() {
                stop = "line search failed".into();
                break;
            }
            mem.clear();
            continue;
        };
        let new_theta = axpy(&theta, step, &d);
        let s: Vec<f64> = new_theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if mem.len() == settings.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        theta = new_theta;
        loss = new_loss;
        grad = new_grad;
        history.push(loss);
        it += 1;
        if history.len() > settings.window {
            let old = history[history.len() - 1 - settings.window];
            if (old - loss).abs() <= settings.rel_tol * loss.abs().max(f64::MIN_POSITIVE) {
                stop = "relative loss change below tolerance".into();
                break;
            }
        }
        if loss == 0.0 {
            stop = "zero loss".into();
            break;
        }
    }
    Ok(LbfgsResult {
        theta,
        loss,
        history,
        iterations: it,
        stop,
    })
}

/// Strong-Wolfe line search (bracketing then zoom with cubic interpolation).
fn wolfe_search<F>(
    x: &[f64],
    f0: f64,
    g0: f64,
    d: &[f64],
    s: &LbfgsSettings,
    f: &mut F,
) -> Result<Option<(f64, f64, Vec<f64>)>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut eval = |a: f64| -> Result<(f64, f64, Vec<f64>)> {
        let (v, g) = f(&axpy(x, a, d))?;
        let slope = if v.is_finite() { dot(&g, d) } else { f64::NAN };
        Ok((v, slope, g))
    };
    let (mut a_prev, mut f_prev, mut g_prev) = (0.0, f0, g0);
    let mut a = 1.0;
    for i in 0..20 {
        let (fa, ga, grad) = eval(a)?;
        if !fa.is_finite() {
            // Shrink into the finite region before bracketing.
            a = 0.5 * (a_prev + a);
            continue;
        }
        if fa > f0 + s.c1 * a * g0 || (i > 0 && fa >= f_prev) {
            return zoom(a_prev, f_prev, g_prev, a, fa, ga, f0, g0, s, &mut eval);
        }
        if ga.abs() <= -s.c2 * g0 {
            return Ok(Some((a, fa, grad)));
        }
        if ga >= 0.0 {
            return zoom(a, fa, ga, a_prev, f_prev, g_prev, f0, g0, s, &mut eval);
        }
        (a_prev, f_prev, g_prev) = (a, fa, ga);
        a *= 2.0;
    }
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn zoom<E>(
    mut lo: f64,
    mut f_lo: f64,
    mut g_lo: f64,
    mut hi: f64,
    mut f_hi: f64,
    mut g_hi: f64,
    f0: f64,
    g0: f64,
    s: &LbfgsSettings,
    eval: &mut E,
) -> Result<Option<(f64, f64, Vec<f64>)>>
where
    E: FnMut(f64) -> Result<(f64, f64, Vec<f64>)>,
{
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for _ in 0..30 {
        let a = cubic_min(lo, f_lo, g_lo, hi, f_hi, g_hi);
        let (fa, ga, grad) = eval(a)?;
        if !fa.is_finite() || fa > f0 + s.c1 * a * g0 || fa >= f_lo {
            (hi, f_hi, g_hi) = (a, if fa.is_finite() { fa } else { f64::MAX }, if ga.is_finite() { ga } else { 0.0 });
        } else {
            if ga.abs() <= -s.c2 * g0 {
                return Ok(Some((a, fa, grad)));
            }
            if ga * (hi - lo) >= 0.0 {
                (hi, f_hi, g_hi) = (lo, f_lo, g_lo);
            }
            (lo, f_lo, g_lo) = (a, fa, ga);
            best = Some((a, fa, grad));
        }
        if (hi - lo).abs() <= 1e-12 * lo.abs().max(1e-12) {
            break;
        }
    }
    // Accept a sufficient-decrease point even if the curvature test failed.
    Ok(best.filter(|(a, fa, _)| *fa <= f0 + s.c1 * a * g0))
}

/// Minimizer of the cubic through two points with slopes, kept inside the
/// interval and away from its ends.
fn cubic_min(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let (l, r) = (a.min(b), a.max(b));
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    let mid = 0.5 * (a + b);
    if !disc.is_finite() || disc < 0.0 || !fb.is_finite() || fb == f64::MAX {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    let margin = 0.1 * (r - l);
    if t.is_finite() && t > l + margin && t < r - margin {
        t
    } else {
        mid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn lbfgs_solves_rosenbrock_monotonically() {
        let r = lbfgs(vec![-1.2, 1.0], &LbfgsSettings::default(), rosenbrock).unwrap();
        assert!((r.theta[0] - 1.0).abs() < 1e-5 && (r.theta[1] - 1.0).abs() < 1e-5, "{:?}", r.theta);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut opt = Adam::new(2, 0.05);
        let mut x = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * x[0], 8.0 * x[1]];
            opt.step(&mut x, &g);
        }
        assert!(x[0].abs() < 1e-3 && x[1].abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn non_finite_trials_are_rejected() {
        // log-barrier: infinite for x ≤ 0.
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] <= 0.0 {
                return Ok((f64::INFINITY, vec![f64::NAN]));
            }
            Ok((x[0] - 2.0 * x[0].ln(), vec![1.0 - 2.0 / x[0]]))
        };
        let r = lbfgs(vec![0.1], &LbfgsSettings::default(), f).unwrap();
        assert!((r.theta[0] - 2.0).abs() < 1e-6, "{:?}", r.theta);
    }
}
