//! Explicit Runge–Kutta integrators: adaptive Dormand–Prince 5(4) and classic RK4.

use crate::error::{Error, Result};

/// What the step observer wants the integrator to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepControl {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_max: f64,
    /// Steps below this size are treated as a collapse.
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            h_init: 1e-3,
            h_max: f64::INFINITY,
            h_min: 1e-12,
            max_steps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Reached the requested end time.
    Finished,
    /// The observer asked to stop.
    Stopped,
}

#[derive(Debug, Clone, Default)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

// Dormand–Prince tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `y' = rhs(t, y)` from `t0` to `t_end` with an adaptive
/// Dormand–Prince pair. `observe` is called after every accepted step with the
/// new `(t, y)`; it may rewrite `y` (e.g. to project onto a manifold) and may
/// stop the integration.
pub fn dopri5<R, O>(
    mut rhs: R,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    tol: &Tolerances,
    mut observe: O,
) -> Result<(f64, Vec<f64>, Outcome, Stats)>
where
    R: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    O: FnMut(f64, &mut [f64]) -> StepControl,
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut stats = Stats::default();
    if t_end <= t0 {
        return Ok((t, y, Outcome::Finished, stats));
    }
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; n]).collect();
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    rhs(t, &y, &mut k[0])?;
    stats.rhs_evals += 1;
    let mut h = tol.h_init.min(t_end - t0).min(tol.h_max);
    let mut err_prev: f64 = 1e-4;
    let mut fsal_valid = true;

    while t < t_end {
        if stats.accepted + stats.rejected >= tol.max_steps {
            return Err(Error::NonConvergence(format!(
                "integrator exceeded {} steps at t = {t}",
                tol.max_steps
            )));
        }
        if h < tol.h_min {
            return Err(Error::NonConvergence(format!(
                "step size collapsed to {h:e} at t = {t}"
            )));
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        if !fsal_valid {
            rhs(t, &y, &mut k[0])?;
            stats.rhs_evals += 1;
        }
        let stages: [(f64, &[f64]); 5] = [
            (C2, &[A21]),
            (C3, &[A31, A32]),
            (C4, &[A41, A42, A43]),
            (C5, &[A51, A52, A53, A54]),
            (1.0, &[A61, A62, A63, A64, A65]),
        ];
        for (s, (c, a)) in stages.iter().enumerate() {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, aj) in a.iter().enumerate() {
                    acc += aj * k[j][i];
                }
                tmp[i] = y[i] + h * acc;
            }
            rhs(t + c * h, &tmp, &mut k[s + 1])?;
        }
        for i in 0..n {
            y_new[i] = y[i] + h * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i] + B5 * k[4][i] + B6 * k[5][i]);
        }
        rhs(t + h, &y_new, &mut k[6])?;
        stats.rhs_evals += 6;

        let mut err = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                    + E7 * k[6][i]);
            let sc = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            stats.rejected += 1;
            h *= 0.1;
            fsal_valid = true;
            continue;
        }
        if err <= 1.0 {
            t = if last { t_end } else { t + h };
            std::mem::swap(&mut y, &mut y_new);
            stats.accepted += 1;
            tmp.copy_from_slice(&y);
            let ctrl = observe(t, &mut y);
            // First-same-as-last only holds if the observer left y alone.
            fsal_valid = tmp == y;
            if fsal_valid {
                k.swap(0, 6);
            }
            if ctrl == StepControl::Stop {
                return Ok((t, y, Outcome::Stopped, stats));
            }
            // PI step-size controller.
            let fac = 0.9 * err.max(1e-10).powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0);
            h = (h * fac.clamp(0.2, 10.0)).min(tol.h_max);
            err_prev = err.max(1e-4);
        } else {
            stats.rejected += 1;
            let fac = 0.9 * err.powf(-1.0 / 5.0);
            h *= fac.clamp(0.1, 0.9);
            fsal_valid = true;
        }
    }
    Ok((t, y, Outcome::Finished, stats))
}

/// One classic fourth-order Runge–Kutta step.
pub fn rk4_step<R>(mut rhs: R, t: f64, y: &[f64], h: f64) -> Vec<f64>
where
    R: FnMut(f64, &[f64]) -> Vec<f64>,
{
    let n = y.len();
    let k1 = rhs(t, y);
    let y2: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
    let k2 = rhs(t + 0.5 * h, &y2);
    let y3: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k2[i]).collect();
    let k3 = rhs(t + 0.5 * h, &y3);
    let y4: Vec<f64> = (0..n).map(|i| y[i] + h * k3[i]).collect();
    let k4 = rhs(t + h, &y4);
    (0..n)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}
