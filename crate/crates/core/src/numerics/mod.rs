//! Scalar and tensor transforms shared by the world model and the
//! actor-critic.

mod normalizer;
mod return_scale;
mod twohot;

pub use normalizer::EmaNormalizer;
pub use return_scale::{percentile, ReturnScale};
pub use twohot::{BinTransform, TwohotCodec};

use candle_core::{Tensor, D};

use crate::{Error, Result};

/// Uniform mass mixed into every categorical distribution.
pub const UNIMIX: f64 = 0.01;

pub fn symlog(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("symlog of {x}")));
    }
    Ok(x.signum() * x.abs().ln_1p())
}

pub fn symexp(y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Domain(format!("symexp of {y}")));
    }
    Ok(y.signum() * y.abs().exp_m1())
}

/// Elementwise symlog on a tensor.
pub fn symlog_tensor(x: &Tensor) -> Result<Tensor> {
    Ok(x.sign()?.mul(&(x.abs()? + 1.0)?.log()?)?)
}

/// Elementwise symexp on a tensor.
pub fn symexp_tensor(y: &Tensor) -> Result<Tensor> {
    Ok(y.sign()?.mul(&(y.abs()?.exp()? - 1.0)?)?)
}

/// Mixes `frac` uniform mass into each row of a simplex matrix.
pub fn unimix(probs: &[Vec<f64>], frac: f64) -> Vec<Vec<f64>> {
    probs
        .iter()
        .map(|row| {
            let u = frac / row.len() as f64;
            row.iter().map(|p| (1.0 - frac) * p + u).collect()
        })
        .collect()
}

fn check_simplex(name: &str, m: &[Vec<f64>]) -> Result<()> {
    for (g, row) in m.iter().enumerate() {
        if let Some(p) = row.iter().find(|p| **p < 0.0 || p.is_nan()) {
            return Err(Error::contract(format!("{name}[{g}] has probability {p}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("{name}[{g}] sums to {s}")));
        }
    }
    Ok(())
}

/// KL(p || q) summed over categorical groups (rows).
///
/// Zero entries of `p` contribute nothing. A zero entry of `q` under positive
/// `p` yields `+inf`; inputs that went through [`unimix`] never hit that case.
pub fn categorical_kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    if p.len() != q.len() || p.iter().zip(q).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::contract("categorical_kl: shape mismatch"));
    }
    check_simplex("p", p)?;
    check_simplex("q", q)?;
    let mut kl = 0.0;
    for (pr, qr) in p.iter().zip(q) {
        for (&pi, &qi) in pr.iter().zip(qr) {
            if pi > 0.0 {
                kl += pi * (pi / qi).ln();
            }
        }
    }
    Ok(kl.max(0.0))
}

/// Softmax over the last dimension followed by the [`UNIMIX`] floor.
/// Returns `(probs, log_probs)`.
pub fn unimix_categorical(logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let classes = logits.dim(D::Minus1)? as f64;
    let probs = softmax_last(logits)?;
    let probs = ((probs * (1.0 - UNIMIX))? + UNIMIX / classes)?;
    let logp = probs.log()?;
    Ok((probs, logp))
}

/// Numerically stable softmax over the last dimension, built from
/// differentiable primitives.
pub fn softmax_last(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Tensor KL over categorical groups: inputs `(..., G, C)` log-probabilities,
/// output summed over `G` and `C`, leaving the leading dimensions.
pub fn categorical_kl_tensor(p_log: &Tensor, q_log: &Tensor) -> Result<Tensor> {
    let p = p_log.exp()?;
    let kl = p.mul(&(p_log - q_log)?)?;
    Ok(kl.sum(D::Minus1)?.sum(D::Minus1)?)
}

/// Exact entropy of categorical distributions over the last dimension.
pub fn categorical_entropy(probs: &Tensor, log_probs: &Tensor) -> Result<Tensor> {
    Ok(probs.mul(log_probs)?.sum(D::Minus1)?.neg()?)
}
