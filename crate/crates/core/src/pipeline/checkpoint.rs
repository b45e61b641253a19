use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Agent;
use crate::binfmt::{self, ArrayData, NamedArray, FORMAT_VERSION};
use crate::config::TrainConfig;
use crate::nn::{Adam, ParamStore};
use crate::numerics::{EmaNormalizer, ReturnScale};
use crate::{Error, Result};

const PARAMS_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "manifest.json";
const KIND: &str = "checkpoint";

/// Progress counters carried across resumes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub env_steps: u64,
    pub train_steps: u64,
    pub episodes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::contract(format!("checkpoint rng {what} is malformed"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad("position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub label: String,
    pub counters: Counters,
    pub config_hash: String,
    pub config: TrainConfig,
    pub normalizers: Vec<EmaNormalizer>,
    pub return_scale: ReturnScale,
    pub rng: RngState,
    pub optimizer_steps: [u64; 3],
    pub params_file: String,
}

/// A loaded checkpoint: the restored agent and its counters.
#[derive(Debug)]
pub struct Checkpoint {
    pub agent: Agent,
    pub manifest: Manifest,
}

fn tensor_array(name: String, t: &Tensor) -> Result<NamedArray> {
    let shape = t.dims().to_vec();
    let flat = t.detach().flatten_all()?;
    let data = match t.dtype() {
        DType::F32 => ArrayData::F32(flat.to_vec1::<f32>()?),
        _ => ArrayData::F64(flat.to_dtype(DType::F64)?.to_vec1::<f64>()?),
    };
    Ok(NamedArray::new(name, shape, data))
}

fn array_tensor(a: &NamedArray, dtype: DType) -> Result<Tensor> {
    let dev = candle_core::Device::Cpu;
    let t = match &a.data {
        ArrayData::F32(v) => Tensor::from_slice(v, a.shape.as_slice(), &dev)?,
        ArrayData::F64(v) => Tensor::from_slice(v, a.shape.as_slice(), &dev)?,
        _ => return Err(Error::contract(format!("array {} is not floating point", a.name))),
    };
    Ok(t.to_dtype(dtype)?)
}

fn push_store(out: &mut Vec<NamedArray>, group: &str, store: &ParamStore) -> Result<()> {
    for (name, var) in store.named() {
        out.push(tensor_array(format!("{group}/{name}"), var.as_tensor())?);
    }
    Ok(())
}

fn push_adam(out: &mut Vec<NamedArray>, group: &str, opt: &Adam) -> Result<()> {
    for (i, (m, v)) in opt.moments().iter().enumerate() {
        out.push(tensor_array(format!("adam.{group}.{i}.m"), m)?);
        out.push(tensor_array(format!("adam.{group}.{i}.v"), v)?);
    }
    Ok(())
}

fn load_store(arrays: &[NamedArray], group: &str, store: &ParamStore, path: &Path) -> Result<()> {
    let values = store
        .named()
        .map(|(name, _)| {
            let a = binfmt::take(arrays, &format!("{group}/{name}"), path)?;
            Ok((name.to_string(), array_tensor(a, store.dtype())?))
        })
        .collect::<Result<Vec<_>>>()?;
    store.load_values(&values)
}

fn load_adam(arrays: &[NamedArray], group: &str, opt: &mut Adam, steps: u64, dtype: DType, path: &Path) -> Result<()> {
    let n = opt.moments().len();
    let moments = (0..n)
        .map(|i| {
            let m = array_tensor(binfmt::take(arrays, &format!("adam.{group}.{i}.m"), path)?, dtype)?;
            let v = array_tensor(binfmt::take(arrays, &format!("adam.{group}.{i}.v"), path)?, dtype)?;
            Ok((m, v))
        })
        .collect::<Result<Vec<_>>>()?;
    opt.restore(steps, moments)
}

/// Writes `ckpt/<label>/` under `logdir` and returns its path. The
/// directory is assembled under a temporary name and renamed into place.
pub fn save_checkpoint(logdir: &Path, label: &str, agent: &Agent, counters: Counters) -> Result<PathBuf> {
    let root = logdir.join("ckpt");
    std::fs::create_dir_all(&root)?;
    let dir = root.join(label);
    let tmp = root.join(format!(".{label}.tmp"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;

    let mut arrays = Vec::new();
    push_store(&mut arrays, "wm", &agent.model.wm_store)?;
    push_store(&mut arrays, "actor", &agent.model.actor_store)?;
    push_store(&mut arrays, "critic", &agent.critic_store)?;
    push_store(&mut arrays, "slow", &agent.slow_store)?;
    push_adam(&mut arrays, "wm", &agent.wm_opt)?;
    push_adam(&mut arrays, "actor", &agent.actor_opt)?;
    push_adam(&mut arrays, "critic", &agent.critic_opt)?;
    let meta = serde_json::json!({ "label": label, "env_steps": counters.env_steps });
    binfmt::write_file(&tmp.join(PARAMS_FILE), KIND, meta, &arrays)?;

    let cfg = agent.config();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        label: label.to_string(),
        counters,
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        normalizers: agent.model.hrssm.normalizers().to_vec(),
        return_scale: agent.return_scale.clone(),
        rng: RngState::capture(&agent.rng),
        optimizer_steps: [agent.wm_opt.steps(), agent.actor_opt.steps(), agent.critic_opt.steps()],
        params_file: PARAMS_FILE.to_string(),
    };
    std::fs::write(tmp.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::rename(&tmp, &dir)?;
    Ok(dir)
}

/// Restores an agent from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!("format version {} is not {FORMAT_VERSION}", manifest.format_version),
        ));
    }
    if manifest.config.hash()? != manifest.config_hash {
        return Err(Error::format(&mpath, "config hash does not match the stored config"));
    }
    let mut agent = Agent::new(&manifest.config)?;
    let ppath = dir.join(&manifest.params_file);
    let (_, arrays) = binfmt::read_file(&ppath, KIND)?;
    let dtype = agent.model.dtype();
    load_store(&arrays, "wm", &agent.model.wm_store, &ppath)?;
    load_store(&arrays, "actor", &agent.model.actor_store, &ppath)?;
    load_store(&arrays, "critic", &agent.critic_store, &ppath)?;
    load_store(&arrays, "slow", &agent.slow_store, &ppath)?;
    let [ws, as_, cs] = manifest.optimizer_steps;
    load_adam(&arrays, "wm", &mut agent.wm_opt, ws, dtype, &ppath)?;
    load_adam(&arrays, "actor", &mut agent.actor_opt, as_, dtype, &ppath)?;
    load_adam(&arrays, "critic", &mut agent.critic_opt, cs, dtype, &ppath)?;
    agent.model.hrssm.set_normalizers(manifest.normalizers.clone())?;
    agent.return_scale = manifest.return_scale.clone();
    agent.rng = manifest.rng.restore()?;
    agent.train_steps = manifest.counters.train_steps;
    Ok(Checkpoint { agent, manifest })
}

/// The checkpoint to resume from: `final` if present, otherwise the
/// largest numeric step.
pub fn latest_checkpoint(logdir: &Path) -> Result<Option<PathBuf>> {
    let root = logdir.join("ckpt");
    if !root.is_dir() {
        return Ok(None);
    }
    let fin = root.join("final");
    if fin.join(MANIFEST_FILE).is_file() {
        return Ok(Some(fin));
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(&root)? {
        let path = entry?.path();
        let Some(step) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<u64>().ok()) else {
            continue;
        };
        if path.join(MANIFEST_FILE).is_file() && best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}
