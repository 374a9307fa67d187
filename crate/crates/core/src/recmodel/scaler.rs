use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Per-channel affine map `scaled = (value - offset) / gain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineScaler {
    offset: Vec<f64>,
    gain: Vec<f64>,
}

impl AffineScaler {
    pub fn new(offset: Vec<f64>, gain: Vec<f64>) -> Result<Self> {
        check_dim("scaler gains", offset.len(), gain.len())?;
        if let Some(g) = gain.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidInput(format!("scaler gain must be positive, got {g}")));
        }
        if offset.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput("scaler offset must be finite".into()));
        }
        Ok(Self { offset, gain })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            offset: vec![0.0; dim],
            gain: vec![1.0; dim],
        }
    }

    /// Maps each channel's observed `[min, max]` onto `[-1, 1]`. Constant
    /// channels get unit gain.
    pub fn fit_min_max(samples: &[DVector<f64>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot fit a scaler to no samples".into()))?;
        let dim = first.len();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for s in samples {
            check_dim("scaler sample", dim, s.len())?;
            for (i, v) in s.iter().enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
        }
        let offset = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let gain = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| {
                let half = 0.5 * (h - l);
                if half > 0.0 {
                    half
                } else {
                    1.0
                }
            })
            .collect();
        Self::new(offset, gain)
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn scale(&self, value: &[f64]) -> Result<Vec<f64>> {
        check_dim("scale", self.dim(), value.len())?;
        let mut out = vec![0.0; value.len()];
        self.scale_into(value, &mut out);
        Ok(out)
    }

    pub fn unscale(&self, scaled: &[f64]) -> Result<Vec<f64>> {
        check_dim("unscale", self.dim(), scaled.len())?;
        let mut out = vec![0.0; scaled.len()];
        self.unscale_into(scaled, &mut out);
        Ok(out)
    }

    pub(crate) fn scale_into(&self, value: &[f64], out: &mut [f64]) {
        for i in 0..self.offset.len() {
            out[i] = (value[i] - self.offset[i]) / self.gain[i];
        }
    }

    pub(crate) fn unscale_into(&self, scaled: &[f64], out: &mut [f64]) {
        for i in 0..self.offset.len() {
            out[i] = self.offset[i] + self.gain[i] * scaled[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_is_a_no_op() {
        let s = AffineScaler::identity(3);
        assert_eq!(s.scale(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn gain_two_offset_one() {
        let s = AffineScaler::new(vec![1.0], vec![2.0]).unwrap();
        assert_eq!(s.scale(&[3.0]).unwrap(), vec![1.0]);
        assert_eq!(s.unscale(&[1.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn rejects_non_positive_gain_and_bad_dims() {
        assert!(AffineScaler::new(vec![0.0], vec![0.0]).is_err());
        assert!(AffineScaler::new(vec![0.0], vec![-1.0]).is_err());
        let s = AffineScaler::identity(2);
        assert!(matches!(s.scale(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn min_max_fit_maps_to_unit_box() {
        let samples = vec![
            DVector::from_vec(vec![65.0, 3.0]),
            DVector::from_vec(vec![85.0, 3.0]),
            DVector::from_vec(vec![70.0, 3.0]),
        ];
        let s = AffineScaler::fit_min_max(&samples).unwrap();
        assert_eq!(s.scale(&[65.0, 3.0]).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(s.scale(&[85.0, 3.0]).unwrap(), vec![1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn round_trip(
            v in prop::collection::vec(-1e3f64..1e3, 4),
            off in prop::collection::vec(-50f64..50.0, 4),
            gain in prop::collection::vec(0.01f64..100.0, 4),
        ) {
            let s = AffineScaler::new(off, gain).unwrap();
            let back = s.unscale(&s.scale(&v).unwrap()).unwrap();
            for (a, b) in v.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
