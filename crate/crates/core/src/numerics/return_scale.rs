use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear-interpolation percentile (`q` in `[0, 100]`) of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("percentile of an empty batch"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("percentile over NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Running 5th/95th percentile range used to normalize advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnScale {
    low_ema: Option<f64>,
    high_ema: Option<f64>,
    decay: f64,
}

impl Default for ReturnScale {
    fn default() -> Self {
        Self::new(0.99)
    }
}

impl ReturnScale {
    pub const LOW_PERCENTILE: f64 = 5.0;
    pub const HIGH_PERCENTILE: f64 = 95.0;

    pub fn new(decay: f64) -> Self {
        Self {
            low_ema: None,
            high_ema: None,
            decay,
        }
    }

    /// The EMA is seeded with the first batch's percentiles.
    pub fn update(&mut self, returns: &[f64]) -> Result<()> {
        let low = percentile(returns, Self::LOW_PERCENTILE)?;
        let high = percentile(returns, Self::HIGH_PERCENTILE)?;
        let d = self.decay;
        self.low_ema = Some(self.low_ema.map_or(low, |l| d * l + (1.0 - d) * low));
        self.high_ema = Some(self.high_ema.map_or(high, |h| d * h + (1.0 - d) * high));
        Ok(())
    }

    pub fn low(&self) -> f64 {
        self.low_ema.unwrap_or(0.0)
    }

    pub fn high(&self) -> f64 {
        self.high_ema.unwrap_or(0.0)
    }

    pub fn range(&self) -> f64 {
        self.high() - self.low()
    }

    /// Advantage divisor, never below 1.
    pub fn scale(&self) -> f64 {
        self.range().max(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_equal_returns_give_unit_scale() {
        let mut s = ReturnScale::default();
        s.update(&[3.5; 17]).unwrap();
        assert_eq!(s.range(), 0.0);
        assert_eq!(s.scale(), 1.0);
    }

    #[test]
    fn first_batch_seeds_ema() {
        let mut s = ReturnScale::default();
        let r: Vec<f64> = (0..=100).map(f64::from).collect();
        s.update(&r).unwrap();
        assert_eq!(s.low(), 5.0);
        assert_eq!(s.high(), 95.0);
        assert_eq!(s.scale(), 90.0);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(ReturnScale::default().update(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[4.0, 1.0, 2.0, 3.0], 50.0).unwrap(), 2.5);
        assert_eq!(percentile(&[7.0], 95.0).unwrap(), 7.0);
    }

    proptest! {
        #[test]
        fn scale_at_least_one(batches in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..40), 1..10)) {
            let mut s = ReturnScale::default();
            for b in &batches {
                s.update(b).unwrap();
                prop_assert!(s.scale() >= 1.0);
            }
        }

        #[test]
        fn translation_invariant(batch in prop::collection::vec(-50.0f64..50.0, 20..40), shift in -1e3f64..1e3) {
            let mut a = ReturnScale::default();
            let mut b = ReturnScale::default();
            a.update(&batch).unwrap();
            b.update(&batch.iter().map(|x| x + shift).collect::<Vec<_>>()).unwrap();
            prop_assert!((a.scale() - b.scale()).abs() < 1e-9 * (1.0 + shift.abs()));
        }
    }
}
