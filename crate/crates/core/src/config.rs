//! Complete training configuration with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::behavior::{BehaviorConfig, WorldModelScales};
use crate::envs::EnvConfig;
use crate::hrssm::HierConfig;
use crate::nn::AdamConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintActions {
    /// Sampled from the actor.
    ActorSample,
    /// Actor argmax.
    ActorMode,
    /// Actions recorded in replay (training); actor samples elsewhere.
    Replayed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub world_model: AdamConfig,
    pub actor: AdamConfig,
    pub critic: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub batch_size: usize,
    pub batch_length: usize,
    pub buffer_size: usize,
    /// Replayed steps trained on per environment step.
    pub train_ratio: f64,
    /// Environment steps of the whole run.
    pub env_steps: u64,
    /// Random-action steps collected before training starts; at least one
    /// full sequence is always collected first.
    pub prefill: u64,
    pub env_instances: usize,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Collector and trainer alternate deterministically on one thread.
    pub synchronous: bool,
    /// Use every `entry_stride`-th replay position as an imagination start.
    pub entry_stride: usize,
    pub hint_actions: HintActions,
    pub precision: Precision,
    /// Save replay chunks next to each checkpoint.
    pub save_replay: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            batch_length: 32,
            buffer_size: 200_000,
            train_ratio: 32.0,
            env_steps: 100_000,
            prefill: 1024,
            env_instances: 1,
            checkpoint_every: 10_000,
            eval_every: 10_000,
            eval_episodes: 10,
            synchronous: false,
            entry_stride: 1,
            hint_actions: HintActions::ActorSample,
            precision: Precision::F32,
            save_replay: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub hrssm: HierConfig,
    pub behavior: BehaviorConfig,
    pub loss: WorldModelScales,
    pub optim: OptimConfig,
    #[serde(rename = "loop")]
    pub run: LoopConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.hrssm.validate()?;
        self.behavior.validate()?;
        let r = &self.run;
        if !(r.train_ratio > 0.0) || !r.train_ratio.is_finite() {
            return Err(Error::Config("train ratio must be positive".into()));
        }
        if r.batch_size == 0 || r.batch_length == 0 || r.env_instances == 0 || r.entry_stride == 0 {
            return Err(Error::Config("batch sizes, env instances and entry stride must be positive".into()));
        }
        if r.buffer_size < r.batch_length {
            return Err(Error::Config("buffer must hold at least one sequence".into()));
        }
        for (name, a) in [
            ("world_model", &self.optim.world_model),
            ("actor", &self.optim.actor),
            ("critic", &self.optim.critic),
        ] {
            if !(a.lr > 0.0) || !(a.eps > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
                return Err(Error::Config(format!("invalid optimizer settings for {name}")));
            }
        }
        let s = &self.loss;
        if s.rec < 0.0 || s.dyn_kl < 0.0 || s.rep_kl < 0.0 || s.free_bits < 0.0 {
            return Err(Error::Config("loss scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides to the JSON form and re-validates.
    /// Values parse as JSON when possible and as strings otherwise. Keys
    /// must already exist.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_dotted(&mut value, key.trim(), parsed)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::Config(format!("empty config key {key:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back = TrainConfig::from_json(&c.to_json_pretty().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn overrides() {
        let c = TrainConfig::default();
        let o = c.with_overrides(&["hrssm.layers=3", "env.id=constant", "loop.synchronous=true"]).unwrap();
        assert_eq!(o.hrssm.layers, 3);
        assert_eq!(o.env.id, "constant");
        assert!(o.run.synchronous);
        assert_ne!(o.hash().unwrap(), c.hash().unwrap());
        assert!(matches!(c.with_overrides(&["foo=1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["hrssm.nope=1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["hrssm.layers=0"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["loop.train_ratio=0"]), Err(Error::Config(_))));
        assert!(c.with_overrides(&["layers"]).is_err());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
        v["hrssm"]["extra"] = Value::from(1);
        assert!(TrainConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn shipped_configs_load() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let desk = TrainConfig::load(&root.join("desk.json")).unwrap();
        assert_eq!(desk.hrssm.layers, 2);
        assert_eq!(desk.hrssm.frames * desk.hrssm.stride, 4);
        let paper = TrainConfig::load(&root.join("paper_50Mx2.json")).unwrap();
        assert_eq!(paper.hrssm.h_size, 4096);
        assert_eq!(paper.run.batch_size, 16);
        assert_eq!(paper.run.batch_length, 64);
        assert_eq!(paper.run.train_ratio, 48.0);
    }
}
