use serde::{Deserialize, Serialize};

use super::{symexp, symlog};
use crate::{Error, Result};

/// How values map into the space the bin centers live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinTransform {
    /// Centers are in value space.
    Identity,
    /// Centers are evenly spaced in symlog space, so in value space they are
    /// symexp-spaced. Values pass through `symlog` before encoding.
    SymexpSpaced,
}

/// Twohot encoding over a fixed, strictly increasing set of bin centers.
#[derive(Debug, Clone, PartialEq)]
pub struct TwohotCodec {
    bin_centers: Vec<f64>,
    transform: BinTransform,
}

impl TwohotCodec {
    pub fn new(bin_centers: Vec<f64>, transform: BinTransform) -> Result<Self> {
        if bin_centers.len() < 2 {
            return Err(Error::contract("twohot codec needs at least 2 bins"));
        }
        if bin_centers.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::contract("twohot bin centers must be strictly increasing"));
        }
        Ok(Self {
            bin_centers,
            transform,
        })
    }

    /// `bins` centers evenly spaced over `[low, high]` in symlog space.
    pub fn symexp_spaced(bins: usize, low: f64, high: f64) -> Result<Self> {
        if bins < 2 {
            return Err(Error::contract("twohot codec needs at least 2 bins"));
        }
        let step = (high - low) / (bins - 1) as f64;
        let centers = (0..bins)
            .map(|i| if i == bins - 1 { high } else { low + step * i as f64 })
            .collect();
        Self::new(centers, BinTransform::SymexpSpaced)
    }

    pub fn bins(&self) -> usize {
        self.bin_centers.len()
    }

    /// Bin centers in encoding space.
    pub fn bin_centers(&self) -> &[f64] {
        &self.bin_centers
    }

    pub fn transform(&self) -> BinTransform {
        self.transform
    }

    fn forward(&self, v: f64) -> Result<f64> {
        match self.transform {
            BinTransform::Identity => Ok(v),
            BinTransform::SymexpSpaced => symlog(v),
        }
    }

    /// Maps an encoding-space scalar back to value space.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        match self.transform {
            BinTransform::Identity => Ok(y),
            BinTransform::SymexpSpaced => symexp(y),
        }
    }

    /// Returns `(lower_bin, upper_weight)`: weight `1 - w` on `lower_bin` and
    /// `w` on `lower_bin + 1`. Clipped values put all mass on a boundary bin.
    fn locate(&self, value: f64) -> Result<(usize, f64)> {
        if value.is_nan() {
            return Err(Error::Domain("twohot encode of NaN".into()));
        }
        let y = if value.is_infinite() {
            value
        } else {
            self.forward(value)?
        };
        let c = &self.bin_centers;
        let above = c.partition_point(|&b| b <= y);
        if above == 0 {
            return Ok((0, 0.0));
        }
        if above == c.len() {
            return Ok((c.len() - 2, 1.0));
        }
        let below = above - 1;
        Ok((below, (y - c[below]) / (c[above] - c[below])))
    }

    pub fn encode(&self, value: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.bins()];
        self.encode_into(value, &mut out)?;
        Ok(out)
    }

    /// Encodes into a zeroed slice of length `bins()`.
    pub fn encode_into(&self, value: f64, out: &mut [f64]) -> Result<()> {
        let (lo, w) = self.locate(value)?;
        out[lo] += 1.0 - w;
        out[lo + 1] += w;
        Ok(())
    }

    /// Flattened `(values.len(), bins)` twohot targets.
    pub fn encode_batch(&self, values: &[f64]) -> Result<Vec<f64>> {
        let b = self.bins();
        let mut out = vec![0.0; values.len() * b];
        for (v, row) in values.iter().zip(out.chunks_mut(b)) {
            self.encode_into(*v, row)?;
        }
        Ok(out)
    }

    pub fn decode(&self, weights: &[f64]) -> Result<f64> {
        if weights.len() != self.bins() {
            return Err(Error::contract(format!(
                "twohot decode: {} weights for {} bins",
                weights.len(),
                self.bins()
            )));
        }
        let y: f64 = weights.iter().zip(&self.bin_centers).map(|(w, c)| w * c).sum();
        self.inverse(y)
    }
}
