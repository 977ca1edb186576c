//! Smooth saturation onto a control box, with `σ(u_f) = u_f` and `σ'(u_f) = 1`.

use nalgebra::DVector;

use crate::error::{check_dim, Result};
use crate::models::ControlBounds;

/// Exponent clip that keeps `exp` finite far from the box.
const EXP_CLIP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothSat {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub u_f: Vec<f64>,
    pub bounded: Vec<bool>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

impl SmoothSat {
    pub fn new(bounds: &ControlBounds, u_f: &[f64]) -> Result<Self> {
        check_dim("u_f", u_f.len(), bounds.dim())?;
        bounds.check_interior(u_f)?;
        let m = bounds.dim();
        let mut c1 = vec![1.0; m];
        let mut c2 = vec![1.0; m];
        for i in 0..m {
            if bounds.bounded[i] {
                let (lo, hi, f) = (bounds.u_min[i], bounds.u_max[i], u_f[i]);
                c1[i] = (hi - f) / (f - lo);
                c2[i] = (hi - lo) / ((hi - f) * (f - lo));
            }
        }
        Ok(Self {
            u_min: bounds.u_min.clone(),
            u_max: bounds.u_max.clone(),
            u_f: u_f.to_vec(),
            bounded: bounds.bounded.clone(),
            c1,
            c2,
        })
    }

    #[inline]
    fn exp_term(&self, i: usize, u: f64) -> f64 {
        (-self.c2[i] * (u - self.u_f[i])).clamp(-EXP_CLIP, EXP_CLIP).exp()
    }

    pub fn apply_channel(&self, i: usize, u: f64) -> f64 {
        if !self.bounded[i] {
            return u;
        }
        let e = self.exp_term(i, u);
        self.u_min[i] + (self.u_max[i] - self.u_min[i]) / (1.0 + self.c1[i] * e)
    }

    pub fn derivative_channel(&self, i: usize, u: f64) -> f64 {
        if !self.bounded[i] {
            return 1.0;
        }
        let e = self.exp_term(i, u);
        let d = 1.0 + self.c1[i] * e;
        (self.u_max[i] - self.u_min[i]) * self.c1[i] * self.c2[i] * e / (d * d)
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(u.len(), u.iter().enumerate().map(|(i, v)| self.apply_channel(i, *v)))
    }

    pub fn derivative(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(u.len(), u.iter().enumerate().map(|(i, v)| self.derivative_channel(i, *v)))
    }
}

/// `σ(u)` for the box `bounds` centred on `u_f`.
pub fn smooth_saturation(u: &DVector<f64>, bounds: &ControlBounds, u_f: &[f64]) -> Result<DVector<f64>> {
    check_dim("control", u.len(), bounds.dim())?;
    Ok(SmoothSat::new(bounds, u_f)?.apply(u))
}
