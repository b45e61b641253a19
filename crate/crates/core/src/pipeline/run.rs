use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint, Counters};
use super::collect::{evaluate, Collector, EpisodeSummary, EvalSummary};
use super::{Agent, Model, TrainMetrics};
use crate::config::TrainConfig;
use crate::numerics::EmaNormalizer;
use crate::replay::ReplayBuffer;
use crate::{Error, Result};

/// Append-only JSON-lines metrics log. Wallclock time is recorded only when
/// requested, so that synchronous runs produce byte-identical logs.
pub struct MetricsWriter {
    out: BufWriter<File>,
    start: Option<Instant>,
}

impl MetricsWriter {
    pub fn open(path: &Path, wallclock: bool) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
            start: wallclock.then(Instant::now),
        })
    }

    pub fn write(&mut self, kind: &str, step: u64, body: Value) -> Result<()> {
        let mut rec = serde_json::Map::new();
        rec.insert("kind".into(), kind.into());
        rec.insert("step".into(), step.into());
        if let Some(s) = self.start {
            rec.insert("wallclock".into(), s.elapsed().as_secs_f64().into());
        }
        if let Value::Object(m) = body {
            rec.extend(m);
        }
        serde_json::to_writer(&mut self.out, &Value::Object(rec))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint under the log directory.
    pub resume: bool,
    /// Halt once this many environment steps are done, without writing the
    /// final checkpoint (simulates an interrupted run).
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env_steps: u64,
    pub train_steps: u64,
    pub episodes: u64,
    pub checkpoints: Vec<String>,
    pub final_checkpoint: Option<PathBuf>,
    pub last_eval: Option<EvalSummary>,
    pub mean_episode_score: Option<f64>,
}

/// Environment steps collected before the first update: the configured
/// prefill, and never less than one full training sequence.
pub fn prefill_steps(cfg: &TrainConfig) -> u64 {
    cfg.run.prefill.max(cfg.run.batch_length as u64)
}

/// Updates owed after `env_steps` steps: every update replays
/// `batch_size * batch_length` steps and the trainer replays `train_ratio`
/// steps per environment step collected after the prefill.
pub fn target_train_steps(cfg: &TrainConfig, env_steps: u64) -> u64 {
    let p = prefill_steps(cfg);
    if env_steps < p {
        return 0;
    }
    let per_update = (cfg.run.batch_size * cfg.run.batch_length) as f64;
    ((env_steps - p) as f64 * cfg.run.train_ratio / per_update).floor() as u64
}

/// Periodic checkpoint and evaluation bookkeeping.
struct Schedule {
    ckpt_every: u64,
    eval_every: u64,
    ckpt_done: u64,
    eval_done: u64,
}

impl Schedule {
    fn new(cfg: &TrainConfig, env_steps: u64) -> Self {
        let idx = |every: u64| env_steps.checked_div(every).unwrap_or(0);
        Self {
            ckpt_every: cfg.run.checkpoint_every,
            eval_every: cfg.run.eval_every,
            ckpt_done: idx(cfg.run.checkpoint_every),
            eval_done: idx(cfg.run.eval_every),
        }
    }

    fn due(every: u64, done: &mut u64, env_steps: u64) -> Option<u64> {
        if every == 0 || env_steps / every <= *done {
            return None;
        }
        *done = env_steps / every;
        Some(*done * every)
    }

    fn checkpoint(&mut self, env_steps: u64) -> Option<u64> {
        Self::due(self.ckpt_every, &mut self.ckpt_done, env_steps)
    }

    fn eval(&mut self, env_steps: u64) -> Option<u64> {
        Self::due(self.eval_every, &mut self.eval_done, env_steps)
    }
}

/// Trainer-side state shared by both execution modes.
struct Trainer<'a> {
    cfg: &'a TrainConfig,
    logdir: &'a Path,
    agent: Agent,
    metrics: &'a Mutex<MetricsWriter>,
    schedule: Schedule,
    checkpoints: Vec<String>,
    last_eval: Option<EvalSummary>,
}

impl Trainer<'_> {
    fn train(&mut self, buffer: &ReplayBuffer, env_steps: u64) -> Result<TrainMetrics> {
        let m = match self.agent.train_step(buffer) {
            Ok(m) => m,
            Err(e @ Error::NonFinite(_)) => {
                let dump = json!({ "error": e.to_string(), "env_steps": env_steps,
                                   "train_steps": self.agent.train_steps });
                std::fs::write(self.logdir.join("nonfinite_dump.json"), serde_json::to_vec_pretty(&dump)?)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        self.metrics.lock().write("train", env_steps, serde_json::to_value(&m)?)?;
        Ok(m)
    }

    fn periodic(&mut self, buffer: &ReplayBuffer, counters: Counters) -> Result<()> {
        if let Some(label) = self.schedule.checkpoint(counters.env_steps) {
            self.checkpoint(&label.to_string(), buffer, counters)?;
        }
        if let Some(at) = self.schedule.eval(counters.env_steps) {
            let mut model = self.agent.model.snapshot(self.cfg)?;
            let summary = evaluate(&mut model, self.cfg, self.cfg.run.eval_episodes, self.cfg.seed.wrapping_add(at))?;
            self.metrics.lock().write("eval", counters.env_steps, serde_json::to_value(&summary)?)?;
            self.last_eval = Some(summary);
        }
        Ok(())
    }

    fn checkpoint(&mut self, label: &str, buffer: &ReplayBuffer, counters: Counters) -> Result<PathBuf> {
        let dir = save_checkpoint(self.logdir, label, &self.agent, counters)?;
        if self.cfg.run.save_replay {
            buffer.save(&self.logdir.join("replay"))?;
        }
        self.metrics.lock().write(
            "checkpoint",
            counters.env_steps,
            json!({ "label": label, "train_steps": counters.train_steps }),
        )?;
        self.checkpoints.push(label.to_string());
        Ok(dir)
    }
}

fn episode_record(ep: &EpisodeSummary) -> Result<Value> {
    Ok(serde_json::to_value(ep)?)
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let mut a = a.clone();
    a.run.env_steps = b.run.env_steps;
    a == *b
}

/// Trains until the environment-step budget is spent, writing metrics,
/// periodic checkpoints and evaluations under `logdir`, and a final
/// checkpoint at `ckpt/final`.
pub fn run(cfg: &TrainConfig, logdir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(logdir)?;
    let (agent, mut counters, buffer) = match (opts.resume, latest_checkpoint(logdir)?) {
        (true, Some(dir)) => {
            let ck = load_checkpoint(&dir)?;
            if !same_run(cfg, &ck.manifest.config) {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    dir.display()
                )));
            }
            let replay = logdir.join("replay");
            let buffer = if replay.is_dir() {
                ReplayBuffer::load(&replay, cfg.run.buffer_size)?
            } else {
                ReplayBuffer::new(cfg.run.buffer_size, cfg.hrssm.image_size)?
            };
            log::info!("resuming from {} at step {}", dir.display(), ck.manifest.counters.env_steps);
            (ck.agent, ck.manifest.counters, buffer)
        }
        _ => (
            Agent::new(cfg)?,
            Counters::default(),
            ReplayBuffer::new(cfg.run.buffer_size, cfg.hrssm.image_size)?,
        ),
    };
    let metrics = Mutex::new(MetricsWriter::open(&logdir.join("metrics.jsonl"), !cfg.run.synchronous)?);
    if counters.env_steps > 0 {
        metrics.lock().write("resume", counters.env_steps, json!({ "train_steps": counters.train_steps }))?;
    }
    let mut trainer = Trainer {
        cfg,
        logdir,
        agent,
        metrics: &metrics,
        schedule: Schedule::new(cfg, counters.env_steps),
        checkpoints: Vec::new(),
        last_eval: None,
    };
    let stop = opts.stop_after.unwrap_or(cfg.run.env_steps).min(cfg.run.env_steps);
    let scores = if cfg.run.synchronous {
        run_sync(&mut trainer, &buffer, &mut counters, stop)?
    } else {
        run_async(&mut trainer, &buffer, &mut counters, stop)?
    };
    let final_checkpoint = if counters.env_steps >= cfg.run.env_steps {
        Some(trainer.checkpoint("final", &buffer, counters)?)
    } else {
        None
    };
    Ok(RunSummary {
        env_steps: counters.env_steps,
        train_steps: counters.train_steps,
        episodes: counters.episodes,
        checkpoints: trainer.checkpoints,
        final_checkpoint,
        last_eval: trainer.last_eval,
        mean_episode_score: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
    })
}

fn run_sync(trainer: &mut Trainer, buffer: &ReplayBuffer, counters: &mut Counters, stop: u64) -> Result<Vec<f64>> {
    let cfg = trainer.cfg;
    let mut collector = Collector::new(cfg, counters.episodes)?;
    let mut acting = trainer.agent.model.snapshot(cfg)?;
    let prefill = prefill_steps(cfg);
    let mut scores = Vec::new();
    while counters.env_steps < stop {
        let random = counters.env_steps < prefill;
        let finished = collector.step(&mut acting, buffer, random)?;
        counters.env_steps += collector.instances() as u64;
        counters.episodes = collector.episodes_started();
        for ep in &finished {
            trainer.metrics.lock().write("episode", counters.env_steps, episode_record(ep)?)?;
            scores.push(ep.score);
            if ep.env == 0 {
                acting.refresh_from(&trainer.agent.model)?;
            }
        }
        while counters.train_steps < target_train_steps(cfg, counters.env_steps) && buffer.len() >= cfg.run.batch_length {
            trainer.train(buffer, counters.env_steps)?;
            counters.train_steps = trainer.agent.train_steps;
        }
        trainer.periodic(buffer, *counters)?;
    }
    Ok(scores)
}

/// Parameters handed from the trainer to the collector.
struct Snapshot {
    version: u64,
    wm: Vec<(String, candle_core::Tensor)>,
    actor: Vec<(String, candle_core::Tensor)>,
    normalizers: Vec<EmaNormalizer>,
}

impl Snapshot {
    fn capture(model: &Model, version: u64) -> Result<Self> {
        Ok(Self {
            version,
            wm: model.wm_store.values()?,
            actor: model.actor_store.values()?,
            normalizers: model.hrssm.normalizers().to_vec(),
        })
    }

    fn apply(&self, model: &mut Model) -> Result<()> {
        model.wm_store.load_values(&self.wm)?;
        model.actor_store.load_values(&self.actor)?;
        model.hrssm.set_normalizers(self.normalizers.clone())
    }
}

/// Collector and trainer on separate threads. They share the replay buffer,
/// the step counters and a snapshot slot the collector picks up at episode
/// boundaries. The collector pauses while the trainer owes updates; the
/// trainer idles while it is ahead of the train ratio.
fn run_async(trainer: &mut Trainer, buffer: &ReplayBuffer, counters: &mut Counters, stop: u64) -> Result<Vec<f64>> {
    const SLACK: u64 = 1;
    let cfg = trainer.cfg;
    let seq = cfg.run.batch_length;
    let prefill = prefill_steps(cfg);
    let env_steps = AtomicU64::new(counters.env_steps);
    let episodes = AtomicU64::new(counters.episodes);
    let train_steps = AtomicU64::new(counters.train_steps);
    let collecting = AtomicBool::new(true);
    let abort = AtomicBool::new(false);
    let want_snapshot = AtomicBool::new(false);
    let slot: Mutex<Option<Snapshot>> = Mutex::new(None);
    let mut acting = trainer.agent.model.snapshot(cfg)?;
    let metrics = trainer.metrics;
    let idle = Duration::from_millis(1);

    let (scores, trained) = std::thread::scope(|scope| {
        let collector = scope.spawn(|| -> Result<Vec<f64>> {
            let result = (|| {
                let mut collector = Collector::new(cfg, episodes.load(Ordering::SeqCst))?;
                let mut version = 0;
                let mut scores = Vec::new();
                loop {
                    let env = env_steps.load(Ordering::SeqCst);
                    if env >= stop || abort.load(Ordering::SeqCst) {
                        break;
                    }
                    if buffer.len() >= seq && target_train_steps(cfg, env) > train_steps.load(Ordering::SeqCst) + SLACK {
                        std::thread::sleep(idle);
                        continue;
                    }
                    let finished = collector.step(&mut acting, buffer, env < prefill)?;
                    let env = env_steps.fetch_add(collector.instances() as u64, Ordering::SeqCst)
                        + collector.instances() as u64;
                    episodes.store(collector.episodes_started(), Ordering::SeqCst);
                    for ep in &finished {
                        metrics.lock().write("episode", env, episode_record(ep)?)?;
                        scores.push(ep.score);
                        if ep.env == 0 {
                            if let Some(s) = slot.lock().as_ref().filter(|s| s.version > version) {
                                s.apply(&mut acting)?;
                                version = s.version;
                            }
                            want_snapshot.store(true, Ordering::SeqCst);
                        }
                    }
                }
                Ok(scores)
            })();
            if result.is_err() {
                abort.store(true, Ordering::SeqCst);
            }
            collecting.store(false, Ordering::SeqCst);
            result
        });

        let trained = (|| -> Result<()> {
            let mut version = 0;
            loop {
                if abort.load(Ordering::SeqCst) {
                    return Ok(());
                }
                let env = env_steps.load(Ordering::SeqCst);
                let owed = target_train_steps(cfg, env) > trainer.agent.train_steps;
                if owed && buffer.len() >= seq {
                    trainer.train(buffer, env)?;
                    train_steps.store(trainer.agent.train_steps, Ordering::SeqCst);
                    if want_snapshot.swap(false, Ordering::SeqCst) {
                        version += 1;
                        *slot.lock() = Some(Snapshot::capture(&trainer.agent.model, version)?);
                    }
                } else if !collecting.load(Ordering::SeqCst) {
                    return Ok(());
                } else {
                    std::thread::sleep(idle);
                }
                let c = Counters {
                    env_steps: env,
                    train_steps: trainer.agent.train_steps,
                    episodes: episodes.load(Ordering::SeqCst),
                };
                trainer.periodic(buffer, c)?;
            }
        })();
        if trained.is_err() {
            abort.store(true, Ordering::SeqCst);
        }
        let scores = collector.join().expect("collector thread panicked");
        (scores, trained)
    });
    trained?;
    let scores = scores?;
    counters.env_steps = env_steps.load(Ordering::SeqCst);
    counters.train_steps = trainer.agent.train_steps;
    counters.episodes = episodes.load(Ordering::SeqCst);
    trainer.periodic(buffer, *counters)?;
    Ok(scores)
}
