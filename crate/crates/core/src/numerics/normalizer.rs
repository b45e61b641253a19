use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-channel running mean/variance over NCHW image batches, pooled over the
/// batch and spatial dimensions and tracked with an exponential moving average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaNormalizer {
    mean: Vec<f64>,
    variance: Vec<f64>,
    decay: f64,
    floor: f64,
    initialized: bool,
}

impl EmaNormalizer {
    pub const DEFAULT_DECAY: f64 = 0.99;
    pub const DEFAULT_FLOOR: f64 = 1e-8;

    pub fn new(channels: usize) -> Self {
        Self::with_params(channels, Self::DEFAULT_DECAY, Self::DEFAULT_FLOOR)
    }

    pub fn with_params(channels: usize, decay: f64, floor: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "decay must be in (0, 1)");
        assert!(floor > 0.0, "floor must be positive");
        Self {
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            decay,
            floor,
            initialized: false,
        }
    }

    /// Rebuilds a normalizer from stored statistics.
    pub fn from_parts(mean: Vec<f64>, variance: Vec<f64>, decay: f64, floor: f64, initialized: bool) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::contract("normalizer mean/variance length mismatch"));
        }
        Ok(Self {
            variance: variance.into_iter().map(|v| v.max(floor)).collect(),
            mean,
            decay,
            floor,
            initialized,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Folds one batch of per-channel statistics into the running estimate.
    pub fn update_stats(&mut self, batch_mean: &[f64], batch_var: &[f64]) -> Result<()> {
        if batch_mean.len() != self.channels() || batch_var.len() != self.channels() {
            return Err(Error::contract(format!(
                "normalizer has {} channels, batch stats have {}",
                self.channels(),
                batch_mean.len()
            )));
        }
        let d = self.decay;
        for c in 0..self.channels() {
            self.mean[c] = d * self.mean[c] + (1.0 - d) * batch_mean[c];
            self.variance[c] = (d * self.variance[c] + (1.0 - d) * batch_var[c]).max(self.floor);
        }
        self.initialized = true;
        Ok(())
    }

    /// Updates from an NCHW batch using its per-channel mean and population
    /// variance.
    pub fn update(&mut self, x: &Tensor) -> Result<()> {
        let (mean, var) = self.batch_stats(x)?;
        self.update_stats(&mean, &var)
    }

    fn check_shape(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != self.channels() {
            return Err(Error::contract(format!(
                "normalizer expects (N, {}, H, W), got {:?}",
                self.channels(),
                dims
            )));
        }
        Ok(())
    }

    fn batch_stats(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_shape(x)?;
        let c = self.channels();
        let rows = x
            .to_dtype(DType::F64)?
            .transpose(0, 1)?
            .reshape((c, ()))?
            .to_vec2::<f64>()?;
        let mut mean = Vec::with_capacity(c);
        let mut var = Vec::with_capacity(c);
        for row in rows {
            let n = row.len() as f64;
            let m = row.iter().sum::<f64>() / n;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            var.push(v);
        }
        Ok((mean, var))
    }

    fn stat_tensors(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self.channels();
        let std: Vec<f64> = self.variance.iter().map(|v| (v + self.floor).sqrt()).collect();
        let mean = Tensor::from_slice(&self.mean, (1, c, 1, 1), x.device())?.to_dtype(x.dtype())?;
        let std = Tensor::from_slice(&std, (1, c, 1, 1), x.device())?.to_dtype(x.dtype())?;
        Ok((mean, std))
    }

    /// `(x - mean) / sqrt(variance + floor)` per channel.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check_shape(x)?;
        let (mean, std) = self.stat_tensors(x)?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    pub fn denormalize(&self, y: &Tensor) -> Result<Tensor> {
        self.check_shape(y)?;
        let (mean, std) = self.stat_tensors(y)?;
        Ok(y.broadcast_mul(&std)?.broadcast_add(&mean)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn filled(v: f64, c: usize) -> Tensor {
        (Tensor::ones((2, c, 3, 3), DType::F64, &Device::Cpu).unwrap() * v).unwrap()
    }

    #[test]
    fn defaults_before_update() {
        let n = EmaNormalizer::new(3);
        assert_eq!(n.mean(), &[0.0; 3]);
        assert_eq!(n.variance(), &[1.0; 3]);
        assert!(!n.is_initialized());
    }

    #[test]
    fn constant_input_update() {
        let mut n = EmaNormalizer::new(3);
        n.update(&filled(1.0, 3)).unwrap();
        for c in 0..3 {
            assert!((n.mean()[c] - 0.01).abs() < 1e-15);
            assert!((n.variance()[c] - 0.99).abs() < 1e-15);
        }
    }

    #[test]
    fn input_at_mean_keeps_mean_and_shrinks_variance() {
        let mut n = EmaNormalizer::from_parts(vec![0.3], vec![2.0], 0.99, 1e-8, true).unwrap();
        n.update(&filled(0.3, 1)).unwrap();
        assert!((n.mean()[0] - 0.3).abs() < 1e-15);
        assert!((n.variance()[0] - 0.99 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn update_is_order_dependent() {
        let a = filled(1.0, 1);
        let b = Tensor::new(&[0.0f64, 4.0], &Device::Cpu)
            .unwrap()
            .reshape((2, 1, 1, 1))
            .unwrap();
        let mut ab = EmaNormalizer::new(1);
        ab.update(&a).unwrap();
        ab.update(&b).unwrap();
        let mut ba = EmaNormalizer::new(1);
        ba.update(&b).unwrap();
        ba.update(&a).unwrap();
        // mean: 0.99*0.01 + 0.01*2 = 0.0299 vs 0.99*0.02 + 0.01 = 0.0298
        assert!((ab.mean()[0] - 0.0299).abs() < 1e-15);
        assert!((ba.mean()[0] - 0.0298).abs() < 1e-15);
        assert_ne!(ab, ba);
    }

    #[test]
    fn normalize_formula() {
        let n = EmaNormalizer::from_parts(vec![0.01], vec![0.99], 0.99, 1e-8, true).unwrap();
        let y = n.normalize(&filled(1.0, 1)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expected = 0.99 / (0.99f64 + 1e-8).sqrt();
        assert!((y[0] - expected).abs() < 1e-12);
        assert!((y[0] - 0.994987).abs() < 1e-6);
    }

    #[test]
    fn zeros_with_default_stats_stay_zero() {
        let n = EmaNormalizer::new(3);
        let y = n.normalize(&filled(0.0, 3)).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(y.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn channel_mismatch_is_a_contract_error() {
        let mut n = EmaNormalizer::new(3);
        assert!(matches!(n.update(&filled(1.0, 2)), Err(Error::Contract(_))));
        assert!(matches!(n.normalize(&filled(1.0, 2)), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn variance_never_below_floor(stream in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 8), 1..20),
                                      scale in 0.0f64..1e-6) {
            let mut n = EmaNormalizer::with_params(2, 0.5, 1e-4);
            for batch in stream {
                let t = (Tensor::from_vec(batch, (2, 2, 2, 1), &Device::Cpu).unwrap() * scale).unwrap();
                n.update(&t).unwrap();
                prop_assert!(n.variance().iter().all(|v| *v >= 1e-4));
            }
        }

        #[test]
        fn denormalize_inverts_normalize(xs in prop::collection::vec(-5.0f64..5.0, 12),
                                         m in -1.0f64..1.0, v in 1e-3f64..4.0) {
            let n = EmaNormalizer::from_parts(vec![m, -m, 0.5 * m], vec![v, 2.0 * v, 0.5], 0.99, 1e-8, true).unwrap();
            let x = Tensor::from_vec(xs.clone(), (1, 3, 2, 2), &Device::Cpu).unwrap();
            let back = n.denormalize(&n.normalize(&x).unwrap()).unwrap()
                .flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (a, b) in xs.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
