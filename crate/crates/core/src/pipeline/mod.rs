//! Acting model, agent training step, experience collection, checkpoints and
//! the collector/trainer run loop.

mod checkpoint;
mod collect;
mod run;

pub use checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Counters, Manifest};
pub use collect::{evaluate, images_to_tensor, Collector, EpisodeSummary, EvalSummary};
pub use run::{prefill_steps, run, target_train_steps, MetricsWriter, RunOptions, RunSummary};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{
    actor_loss, critic_loss, heads_loss, lambda_returns, policy_entropy, slow_critic_update, world_model_loss,
    Actor, ActorPolicy, Critic, Heads, LayerLossStats,
};
use crate::config::{HintActions, Precision, TrainConfig};
use crate::hrssm::{HierState, Hrssm, LayerDiagnostics, Mode, ObserveOutput};
use crate::nn::{self, Adam, Init, ParamStore};
use crate::numerics::ReturnScale;
use crate::ppb::{ActionProvider, LayerState};
use crate::replay::{ReplayBuffer, ReplayChunk};
use crate::{Error, Result};

/// Independent rng streams derived from the run seed.
pub(crate) mod stream {
    pub const INIT: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const COLLECT: u64 = 2;
    pub const EVAL: u64 = 3;
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn dtype_of(p: Precision) -> DType {
    match p {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

/// World model plus actor: everything needed to act in an environment.
#[derive(Debug)]
pub struct Model {
    pub wm_store: ParamStore,
    pub hrssm: Hrssm,
    pub heads: Heads,
    pub actor_store: ParamStore,
    pub actor: Actor,
    stacked: bool,
    hint_greedy: bool,
}

impl Model {
    pub fn new(cfg: &TrainConfig, dtype: DType, device: &Device, rng: &mut ChaCha8Rng) -> Result<Self> {
        let features = feature_size(cfg);
        let mut wm_store = ParamStore::new(dtype, device.clone());
        let (hrssm, heads) = {
            let mut init = Init::new(&mut wm_store, rng);
            let hrssm = Hrssm::new(&mut init, cfg.hrssm.clone())?;
            let heads = Heads::new(&mut init, features, &cfg.behavior)?;
            (hrssm, heads)
        };
        let mut actor_store = ParamStore::new(dtype, device.clone());
        let actor = Actor::new(
            &mut Init::new(&mut actor_store, rng),
            features,
            cfg.hrssm.num_actions,
            &cfg.behavior,
        )?;
        Ok(Self {
            wm_store,
            hrssm,
            heads,
            actor_store,
            actor,
            stacked: cfg.behavior.stacked_features,
            hint_greedy: cfg.run.hint_actions == HintActions::ActorMode,
        })
    }

    /// Independent deep copy with the same parameter values and normalizers.
    pub fn snapshot(&self, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = seeded(0, stream::INIT);
        let mut copy = Self::new(cfg, self.wm_store.dtype(), self.wm_store.device(), &mut rng)?;
        copy.refresh_from(self)?;
        Ok(copy)
    }

    pub fn refresh_from(&mut self, other: &Model) -> Result<()> {
        self.wm_store.copy_from(&other.wm_store)?;
        self.actor_store.copy_from(&other.actor_store)?;
        self.hrssm.set_normalizers(other.hrssm.normalizers().to_vec())
    }

    pub fn dtype(&self) -> DType {
        self.wm_store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.wm_store.device()
    }

    pub fn stacked(&self) -> bool {
        self.stacked
    }

    pub fn initial_state(&self, batch: usize) -> Result<HierState> {
        self.hrssm.initial_state(batch, self.dtype(), self.device())
    }

    pub fn hint_policy(&self) -> ActorPolicy<'_> {
        ActorPolicy {
            actor: &self.actor,
            stacked: self.stacked,
            greedy: self.hint_greedy,
        }
    }

    /// Eval-mode observation of one frame per row. `images` holds `n` HWC
    /// u8 frames back to back.
    pub fn observe_frames(
        &mut self,
        state: &HierState,
        prev_actions: &[usize],
        images: &[u8],
        is_first: &[bool],
        rng: &mut ChaCha8Rng,
    ) -> Result<ObserveOutput> {
        let n = prev_actions.len();
        let size = self.hrssm.config().image_size;
        let obs = images_to_tensor(images, n, size, self.dtype(), self.device())?;
        let act = nn::one_hot(prev_actions, self.hrssm.config().num_actions, self.dtype(), self.device())?;
        let mut hints = ActorPolicy {
            actor: &self.actor,
            stacked: self.stacked,
            greedy: self.hint_greedy,
        };
        self.hrssm
            .observe(state, &act, &obs, is_first, Mode::Eval, &mut hints, rng, None)
    }

    pub fn choose(&self, state: &HierState, greedy: bool, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        self.actor.choose(&state.features(self.stacked)?, greedy, rng)
    }
}

pub fn feature_size(cfg: &TrainConfig) -> usize {
    if cfg.behavior.stacked_features {
        cfg.hrssm.layers * cfg.hrssm.feature_size()
    } else {
        cfg.hrssm.feature_size()
    }
}

/// Hint actions that replay the recorded future actions of each sequence
/// and fall back to the actor past the end of the chunk.
struct ReplayedActions<'a> {
    chunk: &'a ReplayChunk,
    t: usize,
    calls: usize,
    fallback: ActorPolicy<'a>,
}

impl ActionProvider for ReplayedActions<'_> {
    fn act(&mut self, states: &[LayerState], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let idx = self.t + 1 + self.calls;
        self.calls += 1;
        if idx >= self.chunk.length {
            return self.fallback.act(states, rng);
        }
        let h = &states[0].h;
        let a: Vec<usize> = (0..self.chunk.batch)
            .map(|b| self.chunk.actions[self.chunk.at(b, idx)])
            .collect();
        nn::one_hot(&a, self.fallback.actor.num_actions(), h.dtype(), h.device())
    }
}

/// Everything one training step reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub train_step: u64,
    pub wm_loss: f64,
    pub layers: Vec<LayerLossStats>,
    pub reward_loss: f64,
    pub cont_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
    pub mean_advantage: f64,
    pub return_scale: f64,
    pub critic_loss: f64,
    pub replay_value_loss: f64,
    pub imagined_return: f64,
    pub imagined_value: f64,
    pub wm_grad_norm: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub diagnostics: Vec<LayerDiagnostics>,
    pub traffic: usize,
    pub rollout_transitions: usize,
}

impl TrainMetrics {
    fn check_finite(&self) -> Result<()> {
        let mut vals = vec![
            ("wm_loss", self.wm_loss),
            ("reward_loss", self.reward_loss),
            ("cont_loss", self.cont_loss),
            ("actor_loss", self.actor_loss),
            ("critic_loss", self.critic_loss),
            ("replay_value_loss", self.replay_value_loss),
        ];
        for l in &self.layers {
            vals.extend([("rec", l.rec), ("dyn_kl", l.dyn_kl), ("rep_kl", l.rep_kl)]);
        }
        if let Some((name, v)) = vals.iter().find(|(_, v)| !v.is_finite()) {
            let dump = serde_json::to_string(self).unwrap_or_default();
            return Err(Error::NonFinite(format!("{name} = {v}; metrics: {dump}")));
        }
        Ok(())
    }
}

/// Model, critics, optimizers and training-side state.
#[derive(Debug)]
pub struct Agent {
    cfg: TrainConfig,
    pub model: Model,
    pub critic_store: ParamStore,
    pub critic: Critic,
    pub slow_store: ParamStore,
    pub slow_critic: Critic,
    pub wm_opt: Adam,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub return_scale: ReturnScale,
    pub rng: ChaCha8Rng,
    pub train_steps: u64,
}

impl Agent {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dtype = dtype_of(cfg.run.precision);
        let device = Device::Cpu;
        let mut rng = seeded(cfg.seed, stream::INIT);
        let model = Model::new(cfg, dtype, &device, &mut rng)?;
        let features = feature_size(cfg);
        let mut critic_store = ParamStore::new(dtype, device.clone());
        let critic = Critic::new(&mut Init::new(&mut critic_store, &mut rng), features, &cfg.behavior)?;
        let mut slow_store = ParamStore::new(dtype, device.clone());
        let slow_critic = Critic::new(&mut Init::new(&mut slow_store, &mut rng), features, &cfg.behavior)?;
        slow_store.copy_from(&critic_store)?;
        Ok(Self {
            wm_opt: Adam::new(&model.wm_store, cfg.optim.world_model)?,
            actor_opt: Adam::new(&model.actor_store, cfg.optim.actor)?,
            critic_opt: Adam::new(&critic_store, cfg.optim.critic)?,
            model,
            critic_store,
            critic,
            slow_store,
            slow_critic,
            return_scale: ReturnScale::new(cfg.behavior.return_scale_decay),
            rng: seeded(cfg.seed, stream::TRAIN),
            train_steps: 0,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Samples a chunk and trains on it, storing the final recurrent states
    /// back into the buffer for the sequences that follow.
    pub fn train_step(&mut self, buffer: &ReplayBuffer) -> Result<TrainMetrics> {
        let chunk = buffer.sample(self.cfg.run.batch_size, self.cfg.run.batch_length, &mut self.rng)?;
        let (metrics, finals) = self.train_on_chunk(&chunk)?;
        for (b, state) in finals.into_iter().enumerate() {
            buffer.store_carried(chunk.starts[b] + chunk.length as u64, state);
        }
        Ok(metrics)
    }

    /// One full update on a given chunk. Returns the metrics and the
    /// detached final state of every sequence.
    pub fn train_on_chunk(&mut self, chunk: &ReplayChunk) -> Result<(TrainMetrics, Vec<HierState>)> {
        let cfg = self.cfg.clone();
        let (bsz, len) = (chunk.batch, chunk.length);
        let dtype = self.model.dtype();
        let device = self.model.device().clone();
        let stacked = self.model.stacked;
        let na = cfg.hrssm.num_actions;
        let pix = chunk.image_size * chunk.image_size * 3;

        // Start states: carried where available, otherwise zeros with a
        // forced episode start.
        let mut is_first = chunk.is_first.clone();
        let zero = self.model.initial_state(1)?;
        let mut starts = Vec::with_capacity(bsz);
        for b in 0..bsz {
            match &chunk.carried[b] {
                Some(s) => starts.push(s.clone()),
                None => {
                    starts.push(zero.clone());
                    is_first[chunk.at(b, 0)] = true;
                }
            }
        }
        let mut state = HierState::cat(&starts)?;

        let mut per_step = Vec::with_capacity(len);
        let mut feats = Vec::with_capacity(len);
        let mut posts = Vec::with_capacity(len);
        let mut last: Option<ObserveOutput> = None;
        for t in 0..len {
            let rows: Vec<usize> = (0..bsz).map(|b| chunk.at(b, t)).collect();
            let mut images = Vec::with_capacity(bsz * pix);
            for &r in &rows {
                images.extend_from_slice(&chunk.images[r * pix..(r + 1) * pix]);
            }
            let obs = images_to_tensor(&images, bsz, chunk.image_size, dtype, &device)?;
            let acts: Vec<usize> = rows.iter().map(|&r| chunk.actions[r]).collect();
            let act = nn::one_hot(&acts, na, dtype, &device)?;
            let firsts: Vec<bool> = rows.iter().map(|&r| is_first[r]).collect();
            let actor_hints = ActorPolicy {
                actor: &self.model.actor,
                stacked,
                greedy: cfg.run.hint_actions == HintActions::ActorMode,
            };
            let out = if cfg.run.hint_actions == HintActions::Replayed {
                let mut p = ReplayedActions {
                    chunk,
                    t,
                    calls: 0,
                    fallback: actor_hints,
                };
                self.model
                    .hrssm
                    .observe(&state, &act, &obs, &firsts, Mode::Train, &mut p, &mut self.rng, None)?
            } else {
                let mut p = actor_hints;
                self.model
                    .hrssm
                    .observe(&state, &act, &obs, &firsts, Mode::Train, &mut p, &mut self.rng, None)?
            };
            feats.push(out.state.features(stacked)?);
            posts.push(out.state.detach());
            per_step.push(out.losses.clone());
            state = out.state.clone();
            last = Some(out);
        }
        let last = last.expect("chunk length is positive");
        let finals = (0..bsz)
            .map(|b| Ok(state.narrow(b, 1)?.detach()))
            .collect::<Result<Vec<_>>>()?;

        // Rows below are time-major: row = t * B + b.
        let order: Vec<usize> = (0..len).flat_map(|t| (0..bsz).map(move |b| chunk.at(b, t))).collect();
        let rewards: Vec<f64> = order.iter().map(|&r| chunk.rewards[r]).collect();
        let conts: Vec<f64> = order.iter().map(|&r| if chunk.is_terminal[r] { 0.0 } else { 1.0 }).collect();
        let features = Tensor::cat(&feats, 0)?;

        // World model: representation, dynamics and heads.
        let (wm, layer_stats) = world_model_loss(&per_step, &cfg.loss)?;
        let (hl, head_parts) = heads_loss(&self.model.heads, &features, &rewards, &conts)?;
        let wm_total = (wm + hl)?;
        let wm_loss = nn::scalar(&wm_total)?;
        let mut metrics = TrainMetrics {
            train_step: self.train_steps + 1,
            wm_loss,
            layers: layer_stats,
            reward_loss: head_parts.reward,
            cont_loss: head_parts.cont,
            diagnostics: last.diagnostics()?,
            traffic: last.traffic,
            rollout_transitions: last.rollout_transitions,
            ..Default::default()
        };
        metrics.check_finite()?;
        let grads = wm_total.backward()?;
        metrics.wm_grad_norm = self.wm_opt.step(&grads)?;
        drop(grads);
        drop(per_step);
        drop(last);

        // Imagination from every (strided) replay position.
        let stride = cfg.run.entry_stride;
        let entry_t: Vec<usize> = (0..len).step_by(stride).collect();
        let entry_states: Vec<HierState> = entry_t.iter().map(|&t| posts[t].clone()).collect();
        let start = HierState::cat(&entry_states)?;
        let n = start.batch();
        let start_cont: Vec<f64> = entry_t
            .iter()
            .flat_map(|&t| (0..bsz).map(move |b| (t, b)))
            .map(|(t, b)| chunk.cont(b, t))
            .collect();
        let horizon = cfg.behavior.imagination_horizon;
        let imagined = {
            let mut policy = ActorPolicy {
                actor: &self.model.actor,
                stacked,
                greedy: false,
            };
            self.model.hrssm.imagine(&start, &mut policy, horizon, &mut self.rng)?
        };
        let im_feats: Vec<Tensor> = imagined
            .states
            .iter()
            .map(|s| Ok(s.features(stacked)?.detach()))
            .collect::<Result<_>>()?;
        let all = Tensor::cat(&im_feats, 0)?;
        let next = all.narrow(0, n, horizon * n)?;
        let im_rew = host(&self.model.heads.reward_mean(&next)?)?;
        let im_cont = host(&self.model.heads.cont_prob(&next)?)?;
        let im_val = host(&self.slow_critic.mean(&all)?)?;

        let g = cfg.behavior.gamma;
        let lam = cfg.behavior.lambda;
        let mut returns = vec![0.0; horizon * n];
        let mut baseline = vec![0.0; horizon * n];
        let mut weights = vec![0.0; horizon * n];
        for col in 0..n {
            let r: Vec<f64> = (0..horizon).map(|i| im_rew[i * n + col]).collect();
            let c: Vec<f64> = (0..horizon).map(|i| im_cont[i * n + col]).collect();
            let v: Vec<f64> = (0..=horizon).map(|i| im_val[i * n + col]).collect();
            let ret = lambda_returns(&r, &c, &v, g, lam)?;
            let mut w = start_cont[col];
            for i in 0..horizon {
                returns[i * n + col] = ret[i];
                baseline[i * n + col] = v[i];
                weights[i * n + col] = w;
                w *= c[i];
            }
        }
        self.return_scale.update(&returns)?;
        let scale = self.return_scale.scale();
        metrics.return_scale = scale;
        metrics.imagined_return = mean(&returns);
        metrics.imagined_value = mean(&baseline);

        // Actor: policy gradient on imagined trajectories only.
        let policy_feats = all.narrow(0, 0, horizon * n)?;
        let actions = Tensor::cat(&imagined.actions, 0)?.detach();
        let dist = self.model.actor.dist(&policy_feats)?;
        let log_pi = dist.log_probs.mul(&actions)?.sum(1)?;
        let entropy = policy_entropy(&dist)?;
        let (al, stats) = actor_loss(
            &log_pi,
            &entropy,
            &returns,
            &baseline,
            &weights,
            scale,
            cfg.behavior.entropy_coeff,
        )?;
        metrics.actor_loss = nn::scalar(&al)?;
        metrics.entropy = stats.entropy;
        metrics.mean_advantage = stats.mean_advantage;

        // Critic: imagined returns plus replayed-sequence returns.
        let cl = critic_loss(
            &self.critic,
            &policy_feats,
            &returns,
            &baseline,
            &weights,
            cfg.behavior.slow_critic_reg,
        )?;
        let replay_feats = features.detach();
        let replay_vals = host(&self.slow_critic.mean(&replay_feats)?)?;
        let (replay_ret, replay_w) = replay_returns(chunk, &is_first, &replay_vals, g, lam)?;
        let rl = critic_loss(
            &self.critic,
            &replay_feats,
            &replay_ret,
            &replay_vals,
            &replay_w,
            cfg.behavior.slow_critic_reg,
        )?;
        metrics.critic_loss = nn::scalar(&cl)?;
        metrics.replay_value_loss = nn::scalar(&rl)?;
        metrics.check_finite()?;

        let grads = al.backward()?;
        metrics.actor_grad_norm = self.actor_opt.step(&grads)?;
        drop(grads);
        let critic_total = (cl + (rl * cfg.behavior.replay_value_scale)?)?;
        let grads = critic_total.backward()?;
        metrics.critic_grad_norm = self.critic_opt.step(&grads)?;
        slow_critic_update(&self.critic_store, &self.slow_store, cfg.behavior.slow_critic_rate)?;

        self.train_steps += 1;
        Ok((metrics, finals))
    }
}

fn host(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Lambda-returns along each replayed sequence in time-major row order.
/// Episodes are cut at `is_first`; the last step of every segment
/// bootstraps from its own value and gets zero weight.
pub fn replay_returns(
    chunk: &ReplayChunk,
    is_first: &[bool],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (bsz, len) = (chunk.batch, chunk.length);
    if values.len() != bsz * len || is_first.len() != bsz * len {
        return Err(Error::contract("replay returns: length mismatch"));
    }
    let mut ret = vec![0.0; bsz * len];
    let mut w = vec![0.0; bsz * len];
    for b in 0..bsz {
        let mut s = 0;
        while s < len {
            let mut e = s;
            while e + 1 < len && !is_first[chunk.at(b, e + 1)] {
                e += 1;
            }
            let r: Vec<f64> = (s + 1..=e).map(|t| chunk.rewards[chunk.at(b, t)]).collect();
            let c: Vec<f64> = (s + 1..=e).map(|t| chunk.cont(b, t)).collect();
            let v: Vec<f64> = (s..=e).map(|t| values[t * bsz + b]).collect();
            let seg = lambda_returns(&r, &c, &v, gamma, lambda)?;
            for (i, t) in (s..=e).enumerate() {
                ret[t * bsz + b] = seg[i];
                w[t * bsz + b] = if t < e { 1.0 } else { 0.0 };
            }
            s = e + 1;
        }
    }
    Ok((ret, w))
}
