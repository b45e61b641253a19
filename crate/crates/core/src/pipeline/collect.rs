use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{seeded, stream, Model};
use crate::config::TrainConfig;
use crate::envs::{make_env, EnvStep, Environment};
use crate::hrssm::HierState;
use crate::replay::{ReplayBuffer, StepRecord};
use crate::{Error, Result};

/// `n` HWC u8 frames to an `(n, 3, size, size)` tensor in `[-0.5, 0.5]`.
pub fn images_to_tensor(images: &[u8], n: usize, size: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if images.len() != n * size * size * 3 {
        return Err(Error::contract(format!(
            "{} bytes for {n} frames of {size}x{size}x3",
            images.len()
        )));
    }
    let t = Tensor::from_slice(images, (n, size, size, 3), device)?
        .to_dtype(dtype)?
        .permute((0, 3, 1, 2))?
        .contiguous()?;
    Ok(((t / 255.0)? - 0.5)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub env: usize,
    pub score: f64,
    pub length: usize,
    pub success: bool,
}

/// Steps `env_instances` environments with a parameter snapshot and writes
/// the experience to replay.
///
/// With one instance every step is appended immediately. With several,
/// each instance's steps are held back and appended as one contiguous
/// episode so that replayed sequences never interleave instances.
pub struct Collector {
    envs: Vec<Box<dyn Environment>>,
    seed: u64,
    episodes: u64,
    rng: ChaCha8Rng,
    state: Option<HierState>,
    current: Vec<EnvStep>,
    prev_action: Vec<usize>,
    is_first: Vec<bool>,
    score: Vec<f64>,
    length: Vec<usize>,
    pending: Vec<Vec<StepRecord>>,
}

impl Collector {
    /// `episodes` is the number of episodes already started in earlier
    /// runs; it decides the environment seeds of the episodes to come.
    pub fn new(cfg: &TrainConfig, episodes: u64) -> Result<Self> {
        let n = cfg.run.env_instances;
        let envs = (0..n)
            .map(|_| make_env(&cfg.env, cfg.hrssm.image_size, cfg.hrssm.num_actions))
            .collect::<Result<Vec<_>>>()?;
        if let Some(e) = envs.iter().find(|e| e.num_actions() != cfg.hrssm.num_actions) {
            return Err(Error::Config(format!(
                "environment has {} actions, model expects {}",
                e.num_actions(),
                cfg.hrssm.num_actions
            )));
        }
        let mut rng = seeded(cfg.seed, stream::COLLECT);
        rng.set_word_pos(u128::from(episodes) << 16);
        Ok(Self {
            envs,
            seed: cfg.seed,
            episodes,
            rng,
            state: None,
            current: Vec::new(),
            prev_action: vec![0; n],
            is_first: vec![true; n],
            score: vec![0.0; n],
            length: vec![0; n],
            pending: vec![Vec::new(); n],
        })
    }

    pub fn episodes_started(&self) -> u64 {
        self.episodes
    }

    pub fn instances(&self) -> usize {
        self.envs.len()
    }

    fn episode_seed(&mut self) -> u64 {
        let s = self.seed.wrapping_mul(1_000_003).wrapping_add(self.episodes);
        self.episodes += 1;
        s
    }

    fn record(&mut self, i: usize, rec: StepRecord, buffer: &ReplayBuffer) -> Result<()> {
        if self.envs.len() == 1 {
            buffer.append(rec)?;
        } else {
            self.pending[i].push(rec);
        }
        Ok(())
    }

    fn flush(&mut self, i: usize, buffer: &ReplayBuffer) -> Result<()> {
        for rec in std::mem::take(&mut self.pending[i]) {
            buffer.append(rec)?;
        }
        Ok(())
    }

    fn start_episode(&mut self, i: usize, buffer: &ReplayBuffer) -> Result<EnvStep> {
        let seed = self.episode_seed();
        let first = self.envs[i].reset(seed)?;
        self.record(
            i,
            StepRecord {
                image: first.image.clone(),
                action: 0,
                reward: 0.0,
                is_first: true,
                is_terminal: false,
            },
            buffer,
        )?;
        self.score[i] = 0.0;
        self.length[i] = 0;
        self.is_first[i] = true;
        Ok(first)
    }

    /// Advances every instance by one step. Uniform random actions are used
    /// when `random` is set; the snapshot still tracks the state. Returns the
    /// episodes that finished.
    pub fn step(&mut self, model: &mut Model, buffer: &ReplayBuffer, random: bool) -> Result<Vec<EpisodeSummary>> {
        let n = self.envs.len();
        if self.state.is_none() {
            self.current = (0..n).map(|i| self.start_episode(i, buffer)).collect::<Result<_>>()?;
            self.state = Some(model.initial_state(n)?);
        }
        let images: Vec<u8> = self.current.iter().flat_map(|s| s.image.iter().copied()).collect();
        let state = self.state.take().expect("state initialized above");
        let out = model.observe_frames(&state, &self.prev_action, &images, &self.is_first, &mut self.rng)?;
        let actions = if random {
            let na = model.hrssm.config().num_actions;
            (0..n).map(|_| self.rng.random_range(0..na)).collect()
        } else {
            model.choose(&out.state, false, &mut self.rng)?
        };
        self.state = Some(out.state.detach());
        let mut done = Vec::new();
        for (i, &a) in actions.iter().enumerate() {
            let step = self.envs[i].step(a)?;
            self.score[i] += step.reward;
            self.length[i] += 1;
            self.record(
                i,
                StepRecord {
                    image: step.image.clone(),
                    action: a,
                    reward: step.reward,
                    is_first: false,
                    is_terminal: step.is_terminal,
                },
                buffer,
            )?;
            self.prev_action[i] = a;
            if step.is_last {
                done.push(EpisodeSummary {
                    env: i,
                    score: self.score[i],
                    length: self.length[i],
                    success: self.envs[i].success(),
                });
                self.flush(i, buffer)?;
                self.current[i] = self.start_episode(i, buffer)?;
            } else {
                self.is_first[i] = false;
                self.current[i] = step;
            }
        }
        Ok(done)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_score: f64,
    pub mean_length: f64,
}

/// Runs `episodes` episodes with frozen parameters and eval-mode
/// normalizers, taking the actor's most likely action.
pub fn evaluate(model: &mut Model, cfg: &TrainConfig, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut env = make_env(&cfg.env, cfg.hrssm.image_size, cfg.hrssm.num_actions)?;
    let mut rng = seeded(seed, stream::EVAL);
    let (mut successes, mut score, mut length) = (0usize, 0.0, 0usize);
    for ep in 0..episodes {
        let mut obs = env.reset(seed.wrapping_mul(7_919).wrapping_add(ep as u64 + (1 << 40)))?;
        let mut state = model.initial_state(1)?;
        let mut prev = 0;
        let mut first = true;
        loop {
            let out = model.observe_frames(&state, &[prev], &obs.image, &[first], &mut rng)?;
            let a = model.choose(&out.state, true, &mut rng)?[0];
            state = out.state.detach();
            obs = env.step(a)?;
            score += obs.reward;
            length += 1;
            prev = a;
            first = false;
            if obs.is_last {
                break;
            }
        }
        if env.success() {
            successes += 1;
        }
    }
    let n = episodes as f64;
    Ok(EvalSummary {
        episodes,
        success_rate: successes as f64 / n,
        mean_score: score / n,
        mean_length: length as f64 / n,
    })
}
