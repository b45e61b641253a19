//! The layer hierarchy: residuals travel up, foresight hints travel down.
//!
//! Layer `k >= 1` observes the normalized error its lower neighbour made
//! when reconstructing its own target; every layer also receives a stack of
//! open-loop decoded frames built from its own rollout and the rollout of
//! the layer above. Everything crossing a layer boundary is detached.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt::{ArrayData, NamedArray};
use crate::nn::{self, Init};
use crate::numerics::{categorical_kl_tensor, EmaNormalizer};
use crate::ppb::{
    rollout_layers, sample_latent, ActionProvider, Categorical, LayerRollout, LayerState, Ppb, PpbConfig,
    Reconstruction, RolloutSpec,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierConfig {
    pub layers: usize,
    pub h_size: usize,
    pub latent_groups: usize,
    pub latent_classes: usize,
    pub cnn_base_channels: usize,
    pub decoder_base_channels: usize,
    pub hidden_size: usize,
    pub image_size: usize,
    pub num_actions: usize,
    /// Foresight frames per hint.
    pub frames: usize,
    /// Steps between consecutive foresight frames.
    pub stride: usize,
    pub hints: bool,
    /// First hint frame is one stride ahead instead of the current step.
    pub hint_from_next_step: bool,
    pub only_residual_hints: bool,
    pub no_residual: bool,
    pub norm_decay: f64,
    pub norm_floor: f64,
}

impl Default for HierConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            h_size: 256,
            latent_groups: 16,
            latent_classes: 16,
            cnn_base_channels: 16,
            decoder_base_channels: 16,
            hidden_size: 256,
            image_size: 32,
            num_actions: 3,
            frames: 4,
            stride: 1,
            hints: true,
            hint_from_next_step: false,
            only_residual_hints: false,
            no_residual: false,
            norm_decay: EmaNormalizer::DEFAULT_DECAY,
            norm_floor: EmaNormalizer::DEFAULT_FLOOR,
        }
    }
}

impl HierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("hierarchy needs at least one layer".into()));
        }
        if self.frames == 0 || self.stride == 0 {
            return Err(Error::Config("hint frames and stride must be positive".into()));
        }
        if !(self.norm_decay > 0.0 && self.norm_decay < 1.0) || !(self.norm_floor > 0.0) {
            return Err(Error::Config("normalizer decay must be in (0,1) and floor positive".into()));
        }
        for k in 0..self.layers {
            self.block_config(k).validate()?;
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.frames * self.stride
    }

    pub fn rollout_spec(&self) -> RolloutSpec {
        RolloutSpec {
            frames: self.frames,
            stride: self.stride,
            skip_current: self.hint_from_next_step,
        }
    }

    fn has_residual(&self, k: usize) -> bool {
        k >= 1 && !self.no_residual
    }

    /// Hint channels of the enhanced observation.
    pub fn hint_channels(&self) -> usize {
        if self.hints {
            3 * self.frames
        } else {
            0
        }
    }

    /// Enhanced-observation channel count for layer `k`.
    pub fn input_channels(&self, k: usize) -> usize {
        self.hint_channels() + 3 + if self.has_residual(k) { 3 } else { 0 }
    }

    pub fn block_config(&self, k: usize) -> PpbConfig {
        PpbConfig {
            h_size: self.h_size,
            latent_groups: self.latent_groups,
            latent_classes: self.latent_classes,
            cnn_base_channels: self.cnn_base_channels,
            decoder_base_channels: self.decoder_base_channels,
            hidden_size: self.hidden_size,
            input_channels: self.input_channels(k),
            image_size: self.image_size,
            num_actions: self.num_actions,
            decode_raw: true,
            decode_residual: self.has_residual(k),
        }
    }

    pub fn feature_size(&self) -> usize {
        self.h_size + self.latent_groups * self.latent_classes
    }

    /// Expected cross-layer elements per sample and step.
    pub fn expected_traffic(&self) -> usize {
        let img = 3 * self.image_size * self.image_size;
        let down = if self.hints { self.frames * img } else { 0 };
        let up = if self.no_residual { 0 } else { img };
        (self.layers - 1) * (down + up)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Recurrent state of every layer.
#[derive(Debug, Clone)]
pub struct HierState {
    pub layers: Vec<LayerState>,
}

impl HierState {
    pub fn batch(&self) -> usize {
        self.layers[0].batch()
    }

    pub fn detach(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LayerState::detach).collect(),
        }
    }

    pub fn masked(&self, keep: &Tensor) -> Result<Self> {
        Ok(Self {
            layers: self.layers.iter().map(|l| l.masked(keep)).collect::<Result<_>>()?,
        })
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            layers: self.layers.iter().map(|l| l.narrow(start, len)).collect::<Result<_>>()?,
        })
    }

    pub fn cat(states: &[HierState]) -> Result<Self> {
        let depth = states[0].layers.len();
        let layers = (0..depth)
            .map(|k| {
                let ls: Vec<LayerState> = states.iter().map(|s| s.layers[k].clone()).collect();
                LayerState::cat(&ls)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Layer-0 features, or all layers concatenated when `stacked`.
    pub fn features(&self, stacked: bool) -> Result<Tensor> {
        if stacked {
            let f: Vec<Tensor> = self.layers.iter().map(LayerState::features).collect::<Result<_>>()?;
            Ok(Tensor::cat(&f, 1)?)
        } else {
            self.layers[0].features()
        }
    }

    /// Exact f64 snapshot of `h` and `z` of every layer.
    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            for (name, t) in [("h", &l.h), ("z", &l.z)] {
                let data = t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                out.push(NamedArray::new(format!("l{k}.{name}"), t.dims().to_vec(), ArrayData::F64(data)));
            }
        }
        Ok(out)
    }

    pub fn from_arrays(arrays: &[NamedArray], dtype: DType, device: &Device) -> Result<Self> {
        let mut layers = Vec::new();
        for k in 0.. {
            let find = |name: String| arrays.iter().find(|a| a.name == name);
            let (Some(h), Some(z)) = (find(format!("l{k}.h")), find(format!("l{k}.z"))) else {
                break;
            };
            let load = |a: &NamedArray| -> Result<Tensor> {
                match &a.data {
                    ArrayData::F64(v) => Ok(Tensor::from_slice(v, a.shape.as_slice(), device)?.to_dtype(dtype)?),
                    _ => Err(Error::contract(format!("state array {} is not f64", a.name))),
                }
            };
            layers.push(LayerState {
                h: load(h)?,
                z: load(z)?,
                probs: None,
            });
        }
        if layers.is_empty() {
            return Err(Error::contract("no layer arrays in state snapshot"));
        }
        Ok(Self { layers })
    }
}

/// Channel stack `[hint frames..., raw, residual]` handed to a layer's
/// encoder. Always detached.
#[derive(Debug, Clone)]
pub struct EnhancedObservation {
    pub hint: Option<Tensor>,
    pub raw: Tensor,
    pub residual: Option<Tensor>,
    pub stacked: Tensor,
}

impl EnhancedObservation {
    pub fn channels(&self) -> usize {
        self.stacked.dims()[1]
    }
}

/// Stacks hint, raw and residual along channels behind a stop-gradient.
pub fn assemble_enhanced(hint: Option<&Tensor>, raw: &Tensor, residual: Option<&Tensor>) -> Result<EnhancedObservation> {
    let spatial = &raw.dims()[2..];
    let mut parts: Vec<Tensor> = Vec::with_capacity(3);
    for t in [hint, Some(raw), residual].into_iter().flatten() {
        if t.rank() != 4 || &t.dims()[2..] != spatial || t.dims()[0] != raw.dims()[0] {
            return Err(Error::contract(format!(
                "enhanced observation parts disagree: {:?} vs {:?}",
                t.dims(),
                raw.dims()
            )));
        }
        parts.push(t.detach());
    }
    let stacked = Tensor::cat(&parts, 1)?;
    Ok(EnhancedObservation {
        hint: hint.map(Tensor::detach),
        raw: raw.detach(),
        residual: residual.map(Tensor::detach),
        stacked,
    })
}

/// `Norm(lower_obs - lower_recon)`; in train mode the statistics first
/// absorb the current difference.
pub fn build_residual(
    lower_obs: &Tensor,
    lower_recon: &Tensor,
    normalizer: &mut EmaNormalizer,
    mode: Mode,
) -> Result<Tensor> {
    if lower_obs.dims() != lower_recon.dims() {
        return Err(Error::contract(format!(
            "residual operands differ: {:?} vs {:?}",
            lower_obs.dims(),
            lower_recon.dims()
        )));
    }
    let diff = (lower_obs.detach() - lower_recon.detach())?;
    if mode == Mode::Train {
        normalizer.update(&diff)?;
    }
    normalizer.normalize(&diff)
}

/// Which rollouts a layer's hint is made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HintSource {
    /// Raw rollout of layer 0.
    Raw,
    /// Residual rollout of the given layer.
    Residual,
}

/// Sums the given rollouts framewise and stacks frames along channels.
/// An empty term list yields zeros shaped like `like` repeated `frames`
/// times.
pub fn build_hint(terms: &[&[Tensor]], frames: usize, like: &Tensor) -> Result<Tensor> {
    for t in terms {
        if t.len() != frames {
            return Err(Error::contract(format!("hint expects {frames} frames, got {}", t.len())));
        }
    }
    let mut stacked = Vec::with_capacity(frames);
    for i in 0..frames {
        let mut acc: Option<Tensor> = None;
        for t in terms {
            let f = t[i].detach();
            acc = Some(match acc {
                None => f,
                Some(a) => (a + f)?,
            });
        }
        stacked.push(match acc {
            Some(a) => a,
            None => like.zeros_like()?,
        });
    }
    Ok(Tensor::cat(&stacked, 1)?)
}

/// Per-sample loss terms of one layer at one step, each shaped `(B,)`.
#[derive(Debug, Clone)]
pub struct LayerLosses {
    pub rec: Tensor,
    /// `KL(sg(posterior) || prior)`.
    pub dyn_kl: Tensor,
    /// `KL(posterior || sg(prior))`.
    pub rep_kl: Tensor,
}

/// Everything produced by one hierarchical observation step.
#[derive(Debug, Clone)]
pub struct ObserveOutput {
    pub state: HierState,
    pub losses: Vec<LayerLosses>,
    pub posteriors: Vec<Categorical>,
    pub priors: Vec<Categorical>,
    pub enhanced: Vec<EnhancedObservation>,
    pub recon: Vec<Reconstruction>,
    /// `o_res^k` for `k = 1..L`, i.e. index 0 holds layer 1's residual.
    pub residuals: Vec<Tensor>,
    pub rollouts: Vec<LayerRollout>,
    /// Cross-layer elements per sample moved during this step.
    pub traffic: usize,
    pub rollout_transitions: usize,
}

/// Test hook: sees and may replace each layer's enhanced observation and
/// the residual it receives from below (used as channel and as target).
pub trait ObserveProbe {
    fn enhanced(&mut self, layer: usize, obs: &EnhancedObservation) -> Option<Tensor>;

    fn residual(&mut self, _layer: usize, _residual: &Tensor) -> Option<Tensor> {
        None
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct LayerDiagnostics {
    pub kl: f64,
    pub rec: f64,
    pub residual_energy: f64,
    pub hint_mean: f64,
    pub hint_std: f64,
}

impl ObserveOutput {
    pub fn diagnostics(&self) -> Result<Vec<LayerDiagnostics>> {
        let mut out = Vec::with_capacity(self.losses.len());
        for (k, l) in self.losses.iter().enumerate() {
            let mut d = LayerDiagnostics {
                kl: nn::scalar(&l.dyn_kl.mean_all()?)?,
                rec: nn::scalar(&l.rec.mean_all()?)?,
                ..Default::default()
            };
            if k >= 1 {
                if let Some(r) = self.residuals.get(k - 1) {
                    d.residual_energy = nn::scalar(&r.abs()?.mean_all()?)?;
                }
            }
            if let Some(h) = &self.enhanced[k].hint {
                let mean = nn::scalar(&h.mean_all()?)?;
                let var = nn::scalar(&(h - mean)?.sqr()?.mean_all()?)?;
                d.hint_mean = mean;
                d.hint_std = var.sqrt();
            }
            out.push(d);
        }
        Ok(out)
    }
}

/// Imagined latent trajectory: `states.len() == actions.len() + 1`.
#[derive(Debug, Clone)]
pub struct Imagined {
    pub states: Vec<HierState>,
    pub actions: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Hrssm {
    cfg: HierConfig,
    blocks: Vec<Ppb>,
    normalizers: Vec<EmaNormalizer>,
}

impl Hrssm {
    pub fn new(init: &mut Init, cfg: HierConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|k| Ppb::new(&mut init.sub(&format!("layer{k}")), cfg.block_config(k)))
            .collect::<Result<_>>()?;
        let normalizers = (1..cfg.layers)
            .map(|_| EmaNormalizer::with_params(3, cfg.norm_decay, cfg.norm_floor))
            .collect();
        Ok(Self {
            cfg,
            blocks,
            normalizers,
        })
    }

    pub fn config(&self) -> &HierConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Ppb] {
        &self.blocks
    }

    /// `Norm^k` lives at index `k - 1`.
    pub fn normalizers(&self) -> &[EmaNormalizer] {
        &self.normalizers
    }

    pub fn set_normalizers(&mut self, normalizers: Vec<EmaNormalizer>) -> Result<()> {
        if normalizers.len() != self.normalizers.len() {
            return Err(Error::contract("normalizer count does not match layer count"));
        }
        self.normalizers = normalizers;
        Ok(())
    }

    pub fn initial_state(&self, batch: usize, dtype: DType, device: &Device) -> Result<HierState> {
        let layers = self
            .blocks
            .iter()
            .map(|b| b.initial_state(batch, dtype, device))
            .collect::<Result<_>>()?;
        Ok(HierState { layers })
    }

    /// Decoded hint rollouts of every layer, started from the deterministic
    /// state `h_t` of each layer.
    fn hint_rollouts(
        &self,
        h: &[Tensor],
        actions: &mut dyn ActionProvider,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<LayerRollout>> {
        let start: Vec<LayerState> = h
            .iter()
            .zip(&self.blocks)
            .map(|(h, b)| {
                let mut s = b.initial_state(h.dims()[0], h.dtype(), h.device())?;
                s.h = h.detach();
                Ok(s)
            })
            .collect::<Result<_>>()?;
        let blocks: Vec<&Ppb> = self.blocks.iter().collect();
        let rolls = rollout_layers(&blocks, &start, actions, self.cfg.rollout_spec(), rng)?;
        Ok(rolls
            .into_iter()
            .map(|r| LayerRollout {
                raw: r.raw.iter().map(Tensor::detach).collect(),
                residual: r.residual.iter().map(Tensor::detach).collect(),
                transitions: r.transitions,
            })
            .collect())
    }

    /// Hint terms for layer `k` and how many of their elements came from
    /// the layer above.
    fn hint_terms<'a>(&self, k: usize, rolls: &'a [LayerRollout]) -> (Vec<&'a [Tensor]>, bool) {
        let top = k + 1 == self.cfg.layers;
        let own: &[Tensor] = if k == 0 || self.cfg.no_residual {
            &rolls[k].raw
        } else {
            &rolls[k].residual
        };
        let upper: Option<&[Tensor]> = (!top).then(|| {
            if self.cfg.no_residual {
                rolls[k + 1].raw.as_slice()
            } else {
                rolls[k + 1].residual.as_slice()
            }
        });
        match (self.cfg.only_residual_hints, upper) {
            (true, Some(u)) => (vec![u], true),
            (true, None) => (vec![], false),
            (false, Some(u)) => (vec![own, u], true),
            (false, None) => (vec![own], false),
        }
    }

    /// One hierarchical observation step.
    ///
    /// `prev` is the state after step `t-1` and `prev_action` the action
    /// taken from it; rows with `is_first` start from zeros. Hints are
    /// rolled out from the new deterministic states before any layer sees
    /// `obs`, then layers are processed bottom-up.
    #[allow(clippy::too_many_arguments)]
    pub fn observe(
        &mut self,
        prev: &HierState,
        prev_action: &Tensor,
        obs: &Tensor,
        is_first: &[bool],
        mode: Mode,
        hint_actions: &mut dyn ActionProvider,
        rng: &mut ChaCha8Rng,
        mut probe: Option<&mut dyn ObserveProbe>,
    ) -> Result<ObserveOutput> {
        let cfg = &self.cfg;
        let batch = obs.dims()[0];
        let size = cfg.image_size;
        if obs.dims() != [batch, 3, size, size] {
            return Err(Error::contract(format!("observation must be (B,3,{size},{size}), got {:?}", obs.dims())));
        }
        if is_first.len() != batch || prev.batch() != batch || prev.layers.len() != cfg.layers {
            return Err(Error::contract("observe: batch or depth mismatch"));
        }
        let keep: Vec<f64> = is_first.iter().map(|f| if *f { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(keep, batch, obs.device())?.to_dtype(obs.dtype())?;
        let prev = prev.masked(&keep)?;
        let prev_action = prev_action.broadcast_mul(&keep.unsqueeze(1)?)?;

        let h: Vec<Tensor> = self
            .blocks
            .iter()
            .zip(&prev.layers)
            .map(|(b, s)| b.sequence_step(&s.h, &s.z, &prev_action))
            .collect::<Result<_>>()?;

        let rolls = if cfg.hints {
            self.hint_rollouts(&h, hint_actions, rng)?
        } else {
            Vec::new()
        };
        let rollout_transitions = rolls.first().map_or(0, |r| r.transitions);

        let img_elems = 3 * size * size;
        let mut traffic = 0;
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut losses = Vec::with_capacity(cfg.layers);
        let mut posteriors = Vec::with_capacity(cfg.layers);
        let mut priors = Vec::with_capacity(cfg.layers);
        let mut enhanced_all = Vec::with_capacity(cfg.layers);
        let mut recon_all: Vec<Reconstruction> = Vec::with_capacity(cfg.layers);
        let mut residuals: Vec<Tensor> = Vec::with_capacity(cfg.layers.saturating_sub(1));

        for k in 0..cfg.layers {
            let residual = if k >= 1 && !cfg.no_residual {
                let (lower_obs, lower_recon) = if k == 1 {
                    (obs.clone(), recon_all[0].raw.clone().expect("layer 0 decodes raw"))
                } else {
                    (
                        residuals[k - 2].clone(),
                        recon_all[k - 1].residual.clone().expect("residual head present"),
                    )
                };
                let r = build_residual(&lower_obs, &lower_recon, &mut self.normalizers[k - 1], mode)?;
                let r = match probe.as_deref_mut().and_then(|p| p.residual(k, &r)) {
                    Some(t) => t.detach(),
                    None => r,
                };
                traffic += r.elem_count() / batch;
                residuals.push(r.clone());
                Some(r)
            } else {
                None
            };

            let hint = if cfg.hints {
                let (terms, from_above) = self.hint_terms(k, &rolls);
                let hint = build_hint(&terms, cfg.frames, obs)?;
                if from_above {
                    traffic += cfg.frames * img_elems;
                }
                Some(hint)
            } else {
                None
            };

            let enhanced = assemble_enhanced(hint.as_ref(), obs, residual.as_ref())?;
            let input = match probe.as_deref_mut().and_then(|p| p.enhanced(k, &enhanced)) {
                Some(t) => t.detach(),
                None => enhanced.stacked.clone(),
            };

            let block = &self.blocks[k];
            let posterior = block.encode(&h[k], &input)?;
            let prior = block.predict(&h[k])?;
            let z = sample_latent(&posterior.probs, rng)?;
            let dyn_kl = categorical_kl_tensor(&posterior.log_probs.detach(), &prior.log_probs)?;
            let rep_kl = categorical_kl_tensor(&posterior.log_probs, &prior.log_probs.detach())?;

            let rec = block.decode(&h[k], &z)?;
            let raw_hat = rec.raw.as_ref().expect("every layer decodes raw");
            let mut rec_loss = sum_sq_per_sample(raw_hat, obs)?;
            if let (Some(res_hat), Some(target)) = (rec.residual.as_ref(), residual.as_ref()) {
                rec_loss = (rec_loss + sum_sq_per_sample(res_hat, target)?)?;
            }

            layers.push(LayerState {
                h: h[k].clone(),
                z,
                probs: Some(posterior.probs.clone()),
            });
            losses.push(LayerLosses {
                rec: rec_loss,
                dyn_kl,
                rep_kl,
            });
            posteriors.push(posterior);
            priors.push(prior);
            enhanced_all.push(enhanced);
            recon_all.push(rec);
        }

        Ok(ObserveOutput {
            state: HierState { layers },
            losses,
            posteriors,
            priors,
            enhanced: enhanced_all,
            recon: recon_all,
            residuals,
            rollouts: rolls,
            traffic,
            rollout_transitions,
        })
    }

    /// Max-abs violation of `target = recon + denorm(residual)` for every
    /// adjacent pair, using the current normalizer statistics.
    pub fn telescoping_errors(&self, obs: &Tensor, out: &ObserveOutput) -> Result<Vec<f64>> {
        let mut errs = Vec::with_capacity(out.residuals.len());
        for (i, r) in out.residuals.iter().enumerate() {
            let k = i + 1;
            let (target, recon) = if k == 1 {
                (obs.clone(), out.recon[0].raw.clone().expect("raw head"))
            } else {
                (out.residuals[k - 2].clone(), out.recon[k - 1].residual.clone().expect("residual head"))
            };
            let rebuilt = (recon.detach() + self.normalizers[k - 1].denormalize(r)?)?;
            let e = (target - rebuilt)?.abs()?.flatten_all()?.max(0)?;
            errs.push(nn::scalar(&e)?);
        }
        Ok(errs)
    }

    /// Latent-only rollout of every layer for `steps` steps with actions
    /// from `policy`. No encoder, decoder or hints are involved and the
    /// trajectory is detached from the model parameters.
    pub fn imagine(
        &self,
        start: &HierState,
        policy: &mut dyn ActionProvider,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Imagined> {
        if steps == 0 {
            return Err(Error::contract("imagination needs at least one step"));
        }
        let mut states = Vec::with_capacity(steps + 1);
        let mut actions = Vec::with_capacity(steps);
        let mut cur = start.detach();
        for _ in 0..steps {
            let a = policy.act(&cur.layers, rng)?.detach();
            let mut next = Vec::with_capacity(cur.layers.len());
            for (block, s) in self.blocks.iter().zip(&cur.layers) {
                let h = block.sequence_step(&s.h, &s.z, &a)?;
                next.push(block.imagine_latent(&h, rng)?.detach());
            }
            states.push(std::mem::replace(&mut cur, HierState { layers: next }));
            actions.push(a);
        }
        states.push(cur);
        Ok(Imagined { states, actions })
    }
}

fn sum_sq_per_sample(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d = (pred - target.detach())?.sqr()?;
    Ok(d.flatten_from(1)?.sum(1)?)
}
