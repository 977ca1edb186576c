//! Affine input scaling to `[−1, 1]` per coordinate.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub center: DVector<f64>,
    pub half_range: DVector<f64>,
}

impl Scaling {
    pub fn identity(n: usize) -> Self {
        Self {
            center: DVector::zeros(n),
            half_range: DVector::from_element(n, 1.0),
        }
    }

    pub fn new(center: DVector<f64>, half_range: DVector<f64>) -> Result<Self> {
        check_dim("half range", half_range.len(), center.len())?;
        if half_range.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidArgument("scaling half ranges must be positive".into()));
        }
        Ok(Self { center, half_range })
    }

    /// Bounding box of the points. Coordinates with no spread keep unit scale.
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a DVector<f64>>, n: usize) -> Result<Self> {
        let mut lo = DVector::from_element(n, f64::INFINITY);
        let mut hi = DVector::from_element(n, f64::NEG_INFINITY);
        let mut any = false;
        for p in points {
            check_dim("scaling sample", p.len(), n)?;
            any = true;
            for i in 0..n {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        if !any {
            return Err(Error::InvalidArgument("cannot fit scaling to no data".into()));
        }
        let center = (&lo + &hi) * 0.5;
        let half = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let h = 0.5 * (hi[i] - lo[i]);
                if h > 1e-12 * (1.0 + center[i].abs()) {
                    h
                } else {
                    1.0
                }
            }),
        );
        Self::new(center, half)
    }

    pub fn scale(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.center).component_div(&self.half_range)
    }

    pub fn unscale(&self, z: &DVector<f64>) -> DVector<f64> {
        z.component_mul(&self.half_range) + &self.center
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_maps_hull_to_unit_box_and_round_trips() {
        let pts: Vec<DVector<f64>> = (0..20)
            .map(|k| DVector::from_vec(vec![(k as f64).sin() * 3.0 + 1.0, k as f64 * 0.5, 7.0]))
            .collect();
        let s = Scaling::fit(&pts, 3).unwrap();
        for p in &pts {
            let z = s.scale(p);
            assert!(z.iter().all(|v| v.abs() <= 1.0 + 1e-15));
            assert!((s.unscale(&z) - p).amax() <= 1e-14 * p.amax().max(1.0));
        }
        assert_eq!(s.half_range[2], 1.0);
        assert!(Scaling::fit(std::iter::empty(), 2).is_err());
    }
}
