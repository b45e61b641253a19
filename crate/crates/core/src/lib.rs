//! Hierarchical recurrent state-space world model whose layers exchange
//! normalized reconstruction residuals (upward) and open-loop foresight
//! frames (downward), plus the imagination-trained actor-critic that runs on
//! top of it.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: symlog/twohot codecs, running normalizers, return scaling,
//!   categorical utilities.
//! - [`nn`]: seeded parameter store, dense/conv layers and the Adam optimizer.
//! - [`ppb`]: a single predictive processing block (sequence model, encoder,
//!   predictor, decoder) and open-loop rollouts.
//! - [`hrssm`]: the layer hierarchy, residual and hint construction.
//! - [`behavior`]: actor, critic, reward/continue heads and all losses.
//! - [`replay`]: sequence replay with chunked on-disk persistence.
//! - [`envs`]: environment trait and the built-in `DodgeWorld`.
//! - [`pipeline`]: collection, training, checkpoints, metrics.

// Validation uses `!(x > 0.0)` style checks on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod behavior;
pub mod binfmt;
pub mod config;
pub mod envs;
mod error;
pub mod hrssm;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod ppb;
pub mod replay;

pub use error::{Error, Result};
