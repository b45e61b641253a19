//! One predictive processing block: the per-layer recurrent state-space model.
//!
//! A block owns a gated sequence model `h' = S(z, h, a)`, a convolutional
//! encoder producing the posterior over categorical latents from `(h, obs)`,
//! a predictor producing the prior from `h` alone, and a transposed
//! convolution decoder with separate raw-image and residual heads.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, ChannelNorm, Conv2d, ConvTranspose2d, Init, LayerNorm, Linear, Mlp};
use crate::numerics::unimix_categorical;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpbConfig {
    pub h_size: usize,
    pub latent_groups: usize,
    pub latent_classes: usize,
    pub cnn_base_channels: usize,
    pub decoder_base_channels: usize,
    pub hidden_size: usize,
    pub input_channels: usize,
    /// Square image side; must be 4 * 2^n with n >= 1.
    pub image_size: usize,
    pub num_actions: usize,
    pub decode_raw: bool,
    pub decode_residual: bool,
}

impl PpbConfig {
    pub fn latent_size(&self) -> usize {
        self.latent_groups * self.latent_classes
    }

    pub fn feature_size(&self) -> usize {
        self.h_size + self.latent_size()
    }

    /// Number of stride-2 stages between the image and the 4x4 bottleneck.
    pub fn conv_stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("h_size", self.h_size),
            ("latent_groups", self.latent_groups),
            ("latent_classes", self.latent_classes),
            ("cnn_base_channels", self.cnn_base_channels),
            ("decoder_base_channels", self.decoder_base_channels),
            ("hidden_size", self.hidden_size),
            ("input_channels", self.input_channels),
            ("num_actions", self.num_actions),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("ppb {name} must be positive")));
        }
        let s = self.image_size;
        if s < 8 || !s.is_multiple_of(4) || !(s / 4).is_power_of_two() {
            return Err(Error::Config(format!("image size {s} is not 4 * 2^n with n >= 1")));
        }
        if !self.decode_raw && !self.decode_residual {
            return Err(Error::Config("a block must decode at least one head".into()));
        }
        Ok(())
    }
}

/// Softmax-with-unimix distribution over `(batch, groups, classes)`.
#[derive(Debug, Clone)]
pub struct Categorical {
    pub probs: Tensor,
    pub log_probs: Tensor,
}

impl Categorical {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (probs, log_probs) = unimix_categorical(logits)?;
        Ok(Self { probs, log_probs })
    }

    pub fn detach(&self) -> Self {
        Self {
            probs: self.probs.detach(),
            log_probs: self.log_probs.detach(),
        }
    }
}

/// Posterior and prior at one step together with the posterior sample.
#[derive(Debug, Clone)]
pub struct PosteriorPriorPair {
    pub posterior: Categorical,
    pub prior: Categorical,
    pub sampled_z: Tensor,
}

/// Recurrent state of one layer for a batch: deterministic `h` of shape
/// `(B, H)` and the one-hot latent `z` of shape `(B, G, C)`.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub h: Tensor,
    pub z: Tensor,
    /// Probabilities `z` was sampled from, when it was sampled.
    pub probs: Option<Tensor>,
}

impl LayerState {
    pub fn zeros(cfg: &PpbConfig, batch: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            h: Tensor::zeros((batch, cfg.h_size), dtype, device)?,
            z: Tensor::zeros((batch, cfg.latent_groups, cfg.latent_classes), dtype, device)?,
            probs: None,
        })
    }

    pub fn batch(&self) -> usize {
        self.h.dims()[0]
    }

    /// `[h, flatten(z)]` along the feature axis.
    pub fn features(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.h, &self.z.flatten_from(1)?], 1)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            h: self.h.detach(),
            z: self.z.detach(),
            probs: self.probs.as_ref().map(Tensor::detach),
        }
    }

    /// Multiplies every row by `keep` (shape `(B,)`), zeroing reset entries.
    pub fn masked(&self, keep: &Tensor) -> Result<Self> {
        let k2 = keep.unsqueeze(1)?;
        let k3 = k2.unsqueeze(2)?;
        Ok(Self {
            h: self.h.broadcast_mul(&k2)?,
            z: self.z.broadcast_mul(&k3)?,
            probs: self.probs.as_ref().map(|p| p.broadcast_mul(&k3)).transpose()?,
        })
    }

    /// Rows `start..start+len` of the batch.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            h: self.h.narrow(0, start, len)?,
            z: self.z.narrow(0, start, len)?,
            probs: self.probs.as_ref().map(|p| p.narrow(0, start, len)).transpose()?,
        })
    }

    /// Concatenates states along the batch axis.
    pub fn cat(states: &[LayerState]) -> Result<Self> {
        let hs: Vec<&Tensor> = states.iter().map(|s| &s.h).collect();
        let zs: Vec<&Tensor> = states.iter().map(|s| &s.z).collect();
        let probs = if states.iter().all(|s| s.probs.is_some()) {
            let ps: Vec<&Tensor> = states.iter().map(|s| s.probs.as_ref().unwrap()).collect();
            Some(Tensor::cat(&ps, 0)?)
        } else {
            None
        };
        Ok(Self {
            h: Tensor::cat(&hs, 0)?,
            z: Tensor::cat(&zs, 0)?,
            probs,
        })
    }
}

/// Decoder output; a head is `None` when the block does not emit it.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub raw: Option<Tensor>,
    pub residual: Option<Tensor>,
}

/// Chooses actions along open-loop rollouts. Receives the imagined state of
/// every layer being rolled out; returns one-hot actions `(B, A)`.
pub trait ActionProvider {
    fn act(&mut self, states: &[LayerState], rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

/// Always returns the same action index.
#[derive(Debug, Clone)]
pub struct FixedAction {
    pub action: usize,
    pub num_actions: usize,
}

impl ActionProvider for FixedAction {
    fn act(&mut self, states: &[LayerState], _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let h = &states[0].h;
        nn::one_hot(&vec![self.action; h.dims()[0]], self.num_actions, h.dtype(), h.device())
    }
}

/// Uniformly random actions.
#[derive(Debug, Clone)]
pub struct UniformActions {
    pub num_actions: usize,
}

impl ActionProvider for UniformActions {
    fn act(&mut self, states: &[LayerState], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let h = &states[0].h;
        let idx: Vec<usize> = (0..h.dims()[0]).map(|_| rng.random_range(0..self.num_actions)).collect();
        nn::one_hot(&idx, self.num_actions, h.dtype(), h.device())
    }
}

/// Frame layout of an open-loop rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutSpec {
    pub frames: usize,
    pub stride: usize,
    /// When set, the first decoded frame is one stride after the current
    /// step instead of the current step itself.
    pub skip_current: bool,
}

impl RolloutSpec {
    pub fn new(frames: usize, stride: usize) -> Self {
        Self {
            frames,
            stride,
            skip_current: false,
        }
    }

    pub fn horizon(&self) -> usize {
        self.frames * self.stride
    }

    /// Step offsets (relative to the start state) that get decoded.
    pub fn decode_offsets(&self) -> Vec<usize> {
        let first = if self.skip_current { self.stride } else { 0 };
        (0..self.frames).map(|i| first + i * self.stride).collect()
    }

    /// Sequence-model transitions the rollout performs.
    pub fn transitions(&self) -> usize {
        if self.skip_current {
            self.horizon()
        } else {
            self.horizon() - 1
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.stride == 0 {
            return Err(Error::contract("rollout needs frames >= 1 and stride >= 1"));
        }
        Ok(())
    }
}

/// Decoded frames of one layer's open-loop rollout, each `(B, 3, H, W)`.
#[derive(Debug, Clone, Default)]
pub struct LayerRollout {
    pub raw: Vec<Tensor>,
    pub residual: Vec<Tensor>,
    pub transitions: usize,
}

#[derive(Debug, Clone)]
pub struct Ppb {
    cfg: PpbConfig,
    seq_in: Linear,
    seq_in_norm: LayerNorm,
    gru: Linear,
    gru_norm: LayerNorm,
    enc_convs: Vec<(Conv2d, ChannelNorm)>,
    enc_fc: Linear,
    enc_norm: LayerNorm,
    enc_out: Linear,
    prior: Mlp,
    dec_fc: Linear,
    dec_fc_norm: ChannelNorm,
    dec_convs: Vec<(ConvTranspose2d, ChannelNorm)>,
    dec_raw: Option<ConvTranspose2d>,
    dec_res: Option<ConvTranspose2d>,
}

impl Ppb {
    pub fn new(init: &mut Init, cfg: PpbConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.h_size;
        let hidden = cfg.hidden_size;
        let stages = cfg.conv_stages();

        let seq_in = Linear::new(&mut init.sub("seq.in"), cfg.latent_size() + cfg.num_actions, hidden)?;
        let seq_in_norm = LayerNorm::new(&mut init.sub("seq.in_norm"), hidden)?;
        let gru = Linear::new(&mut init.sub("seq.gru"), hidden + h, 3 * h)?;
        let gru_norm = LayerNorm::new(&mut init.sub("seq.gru_norm"), 3 * h)?;

        let mut enc_convs = Vec::with_capacity(stages);
        let mut ch = cfg.input_channels;
        for i in 0..stages {
            let out = cfg.cnn_base_channels << i;
            let mut s = init.sub(&format!("enc.conv{i}"));
            enc_convs.push((Conv2d::new(&mut s.sub("conv"), ch, out)?, ChannelNorm::new(&mut s.sub("norm"), out)?));
            ch = out;
        }
        let embed = ch * 16;
        let enc_fc = Linear::new(&mut init.sub("enc.fc"), embed + h, hidden)?;
        let enc_norm = LayerNorm::new(&mut init.sub("enc.norm"), hidden)?;
        let enc_out = Linear::new(&mut init.sub("enc.out"), hidden, cfg.latent_size())?;

        let prior = Mlp::new(&mut init.sub("prior"), h, hidden, 1, cfg.latent_size(), false)?;

        let top = cfg.decoder_base_channels << (stages - 1);
        let dec_fc = Linear::new(&mut init.sub("dec.fc"), cfg.feature_size(), top * 16)?;
        let dec_fc_norm = ChannelNorm::new(&mut init.sub("dec.fc_norm"), top)?;
        let mut dec_convs = Vec::with_capacity(stages - 1);
        let mut ch = top;
        for i in 0..stages - 1 {
            let out = ch / 2;
            let mut s = init.sub(&format!("dec.conv{i}"));
            dec_convs.push((
                ConvTranspose2d::new(&mut s.sub("conv"), ch, out)?,
                ChannelNorm::new(&mut s.sub("norm"), out)?,
            ));
            ch = out;
        }
        let dec_raw = cfg
            .decode_raw
            .then(|| ConvTranspose2d::new(&mut init.sub("dec.raw"), ch, 3))
            .transpose()?;
        let dec_res = cfg
            .decode_residual
            .then(|| ConvTranspose2d::new(&mut init.sub("dec.res"), ch, 3))
            .transpose()?;

        Ok(Self {
            cfg,
            seq_in,
            seq_in_norm,
            gru,
            gru_norm,
            enc_convs,
            enc_fc,
            enc_norm,
            enc_out,
            prior,
            dec_fc,
            dec_fc_norm,
            dec_convs,
            dec_raw,
            dec_res,
        })
    }

    pub fn config(&self) -> &PpbConfig {
        &self.cfg
    }

    pub fn initial_state(&self, batch: usize, dtype: DType, device: &Device) -> Result<LayerState> {
        LayerState::zeros(&self.cfg, batch, dtype, device)
    }

    /// Gated recurrent update `h' = S(z, h, a)`.
    pub fn sequence_step(&self, h: &Tensor, z: &Tensor, action: &Tensor) -> Result<Tensor> {
        for (name, t) in [("h", h), ("z", z), ("action", action)] {
            let probe = nn::scalar(&(t * 0.0)?.sum_all()?)?;
            if probe.is_nan() {
                return Err(Error::contract(format!("sequence_step: non-finite {name}")));
            }
        }
        let hs = self.cfg.h_size;
        if h.dims() != [h.dims()[0], hs] {
            return Err(Error::contract(format!("sequence_step: h has shape {:?}", h.dims())));
        }
        if action.dims().get(1) != Some(&self.cfg.num_actions) {
            return Err(Error::contract(format!("sequence_step: action has shape {:?}", action.dims())));
        }
        let x = Tensor::cat(&[&z.flatten_from(1)?, action], 1)?;
        let x = self.seq_in_norm.forward(&self.seq_in.forward(&x)?)?.silu()?;
        let gates = self.gru_norm.forward(&self.gru.forward(&Tensor::cat(&[&x, h], 1)?)?)?;
        let reset = nn::sigmoid(&gates.narrow(1, 0, hs)?)?;
        let cand = reset.mul(&gates.narrow(1, hs, hs)?)?.tanh()?;
        let update = nn::sigmoid(&(gates.narrow(1, 2 * hs, hs)? - 1.0)?)?;
        let keep = update.affine(-1.0, 1.0)?;
        Ok((update.mul(&cand)? + keep.mul(h)?)?)
    }

    fn embed(&self, obs: &Tensor) -> Result<Tensor> {
        let mut x = obs.clone();
        for (conv, norm) in &self.enc_convs {
            x = norm.forward(&conv.forward(&x)?)?.silu()?;
        }
        Ok(x.flatten_from(1)?)
    }

    fn latent_shape(&self, logits: Tensor) -> Result<Tensor> {
        let b = logits.dims()[0];
        Ok(logits.reshape((b, self.cfg.latent_groups, self.cfg.latent_classes))?)
    }

    /// Posterior `q(z | h, obs)` with the unimix floor applied.
    pub fn encode(&self, h: &Tensor, obs: &Tensor) -> Result<Categorical> {
        let c = obs.dims().get(1).copied();
        if obs.rank() != 4 || c != Some(self.cfg.input_channels) {
            return Err(Error::contract(format!(
                "encoder expects {} input channels, got shape {:?}",
                self.cfg.input_channels,
                obs.dims()
            )));
        }
        let s = self.cfg.image_size;
        if obs.dims()[2] != s || obs.dims()[3] != s {
            return Err(Error::contract(format!("encoder expects {s}x{s} images, got {:?}", obs.dims())));
        }
        let x = Tensor::cat(&[&self.embed(obs)?, h], 1)?;
        let x = self.enc_norm.forward(&self.enc_fc.forward(&x)?)?.silu()?;
        Categorical::from_logits(&self.latent_shape(self.enc_out.forward(&x)?)?)
    }

    /// Prior `p(z | h)`; never sees the observation.
    pub fn predict(&self, h: &Tensor) -> Result<Categorical> {
        Categorical::from_logits(&self.latent_shape(self.prior.forward(h)?)?)
    }

    pub fn decode(&self, h: &Tensor, z: &Tensor) -> Result<Reconstruction> {
        let b = h.dims()[0];
        let x = Tensor::cat(&[h, &z.flatten_from(1)?], 1)?;
        let top = self.cfg.decoder_base_channels << (self.cfg.conv_stages() - 1);
        let mut x = self.dec_fc.forward(&x)?.reshape((b, top, 4, 4))?;
        x = self.dec_fc_norm.forward(&x)?.silu()?;
        for (conv, norm) in &self.dec_convs {
            x = norm.forward(&conv.forward(&x)?)?.silu()?;
        }
        Ok(Reconstruction {
            raw: self.dec_raw.as_ref().map(|d| d.forward(&x)).transpose()?,
            residual: self.dec_res.as_ref().map(|d| d.forward(&x)).transpose()?,
        })
    }

    /// Prior-predicts and samples a fresh latent for `h`.
    pub fn imagine_latent(&self, h: &Tensor, rng: &mut ChaCha8Rng) -> Result<LayerState> {
        let prior = self.predict(h)?;
        let z = sample_latent(&prior.probs, rng)?;
        Ok(LayerState {
            h: h.clone(),
            z,
            probs: Some(prior.probs),
        })
    }

    /// Open-loop rollout of this block alone.
    pub fn open_loop_rollout(
        &self,
        start: &LayerState,
        actions: &mut dyn ActionProvider,
        spec: RolloutSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<LayerRollout> {
        let mut out = rollout_layers(&[self], std::slice::from_ref(start), actions, spec, rng)?;
        Ok(out.pop().expect("one layer rolled out"))
    }
}

/// Draws one class per group and returns straight-through one-hot samples:
/// the forward value is the one-hot draw and the gradient passes to `probs`
/// unchanged.
pub fn sample_latent(probs: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let dims = probs.dims().to_vec();
    let classes = *dims.last().ok_or_else(|| Error::contract("sample_latent on a scalar"))?;
    let flat = probs.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut indices = Vec::with_capacity(flat.len() / classes);
    for row in flat.chunks(classes) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = classes - 1;
        for (i, p) in row.iter().enumerate() {
            acc += p;
            if acc > u {
                pick = i;
                break;
            }
        }
        indices.push(pick);
    }
    let hard = nn::one_hot(&indices, classes, probs.dtype(), probs.device())?.reshape(dims)?;
    Ok((hard + (probs - probs.detach())?)?)
}

/// Joint open-loop rollout of several blocks sharing one action stream.
///
/// Every block's latent at the start is resampled from its prior. The
/// rollout covers `spec.horizon()` steps and decodes at
/// [`RolloutSpec::decode_offsets`]; all decodes of a block run as one batch.
pub fn rollout_layers(
    blocks: &[&Ppb],
    start: &[LayerState],
    actions: &mut dyn ActionProvider,
    spec: RolloutSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LayerRollout>> {
    spec.validate()?;
    if blocks.len() != start.len() {
        return Err(Error::contract("rollout: one start state per block required"));
    }
    let offsets = spec.decode_offsets();
    let last = *offsets.last().unwrap();
    let mut states: Vec<LayerState> = blocks
        .iter()
        .zip(start)
        .map(|(b, s)| b.imagine_latent(&s.h, rng))
        .collect::<Result<_>>()?;
    let mut kept: Vec<Vec<LayerState>> = vec![Vec::with_capacity(spec.frames); blocks.len()];
    let mut transitions = 0;
    let mut next = 0;
    for offset in 0..=spec.horizon() {
        if next < offsets.len() && offsets[next] == offset {
            for (k, s) in states.iter().enumerate() {
                kept[k].push(s.clone());
            }
            next += 1;
        }
        let wanted = if spec.skip_current { spec.horizon() } else { spec.horizon() - 1 };
        if offset >= wanted.max(last) {
            break;
        }
        let a = actions.act(&states, rng)?;
        for (k, block) in blocks.iter().enumerate() {
            let h = block.sequence_step(&states[k].h, &states[k].z, &a)?;
            states[k] = block.imagine_latent(&h, rng)?;
        }
        transitions += 1;
    }

    let mut out = Vec::with_capacity(blocks.len());
    for (block, frames) in blocks.iter().zip(kept) {
        let b = frames[0].batch();
        let joined = LayerState::cat(&frames)?;
        let rec = block.decode(&joined.h, &joined.z)?;
        let split = |t: Option<Tensor>| -> Result<Vec<Tensor>> {
            match t {
                None => Ok(Vec::new()),
                Some(t) => (0..spec.frames).map(|i| Ok(t.narrow(0, i * b, b)?)).collect(),
            }
        };
        out.push(LayerRollout {
            raw: split(rec.raw)?,
            residual: split(rec.residual)?,
            transitions,
        });
    }
    Ok(out)
}
