//! Uniform sequence replay with FIFO eviction, chunked on-disk persistence
//! and a transient store of carried recurrent states.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt::{self, ArrayData, NamedArray};
use crate::hrssm::HierState;
use crate::{Error, Result};

pub const CHUNK_STEPS: usize = 1024;
const CHUNK_KIND: &str = "replay_chunk";

/// One environment step as stored. `action` is the action that led to this
/// observation (zero at episode starts).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// `(h, w, 3)` bytes, row-major.
    pub image: Vec<u8>,
    pub action: usize,
    pub reward: f64,
    pub is_first: bool,
    pub is_terminal: bool,
}

impl StepRecord {
    pub fn cont(&self) -> f64 {
        if self.is_terminal {
            0.0
        } else {
            1.0
        }
    }
}

/// `batch` sequences of `length` contiguous steps, stored sequence-major.
#[derive(Debug, Clone)]
pub struct ReplayChunk {
    pub batch: usize,
    pub length: usize,
    pub image_size: usize,
    pub images: Vec<u8>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub is_first: Vec<bool>,
    pub is_terminal: Vec<bool>,
    /// Global index of each sequence's first step.
    pub starts: Vec<u64>,
    /// State preceding each sequence's first step, if one was stored.
    pub carried: Vec<Option<HierState>>,
}

impl ReplayChunk {
    pub fn at(&self, b: usize, t: usize) -> usize {
        b * self.length + t
    }

    pub fn cont(&self, b: usize, t: usize) -> f64 {
        if self.is_terminal[self.at(b, t)] {
            0.0
        } else {
            1.0
        }
    }
}

#[derive(Debug)]
struct Inner {
    steps: VecDeque<StepRecord>,
    first_index: u64,
    carried: BTreeMap<u64, HierState>,
    prev_terminal: bool,
}

#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    image_size: usize,
    inner: Mutex<Inner>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, image_size: usize) -> Result<Self> {
        if capacity == 0 || image_size == 0 {
            return Err(Error::Config("replay capacity and image size must be positive".into()));
        }
        Ok(Self {
            capacity,
            image_size,
            inner: Mutex::new(Inner {
                steps: VecDeque::new(),
                first_index: 0,
                carried: BTreeMap::new(),
                prev_terminal: false,
            }),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn len(&self) -> usize {
        self.inner.lock().steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global index one past the newest step; counts every step ever added.
    pub fn total_appended(&self) -> u64 {
        let g = self.inner.lock();
        g.first_index + g.steps.len() as u64
    }

    /// Global index of the oldest retained step.
    pub fn first_index(&self) -> u64 {
        self.inner.lock().first_index
    }

    pub fn append(&self, mut step: StepRecord) -> Result<u64> {
        let n = self.image_size * self.image_size * 3;
        if step.image.len() != n {
            return Err(Error::contract(format!("step image has {} bytes, expected {n}", step.image.len())));
        }
        let mut g = self.inner.lock();
        if g.prev_terminal {
            step.is_first = true;
        }
        g.prev_terminal = step.is_terminal;
        g.steps.push_back(step);
        while g.steps.len() > self.capacity {
            g.steps.pop_front();
            g.first_index += 1;
        }
        let first = g.first_index;
        g.carried = g.carried.split_off(&first);
        Ok(first + g.steps.len() as u64 - 1)
    }

    /// Step at a global index, if still retained.
    pub fn get(&self, index: u64) -> Option<StepRecord> {
        let g = self.inner.lock();
        let off = index.checked_sub(g.first_index)? as usize;
        g.steps.get(off).cloned()
    }

    /// Uniform start offsets; sequences run contiguously across episode
    /// boundaries.
    pub fn sample(&self, batch: usize, length: usize, rng: &mut ChaCha8Rng) -> Result<ReplayChunk> {
        if batch == 0 || length == 0 {
            return Err(Error::contract("sample needs batch >= 1 and length >= 1"));
        }
        let g = self.inner.lock();
        let len = g.steps.len();
        if len < length {
            return Err(Error::InsufficientData {
                needed: length,
                available: len,
            });
        }
        let n = len - length + 1;
        let pix = self.image_size * self.image_size * 3;
        let total = batch * length;
        let mut chunk = ReplayChunk {
            batch,
            length,
            image_size: self.image_size,
            images: Vec::with_capacity(total * pix),
            actions: Vec::with_capacity(total),
            rewards: Vec::with_capacity(total),
            is_first: Vec::with_capacity(total),
            is_terminal: Vec::with_capacity(total),
            starts: Vec::with_capacity(batch),
            carried: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let off = rng.random_range(0..n);
            let start = g.first_index + off as u64;
            chunk.starts.push(start);
            chunk.carried.push(g.carried.get(&start).cloned());
            for s in g.steps.range(off..off + length) {
                chunk.images.extend_from_slice(&s.image);
                chunk.actions.push(s.action);
                chunk.rewards.push(s.reward);
                chunk.is_first.push(s.is_first);
                chunk.is_terminal.push(s.is_terminal);
            }
        }
        Ok(chunk)
    }

    /// Remembers the recurrent state that precedes global step `key`.
    /// Ignored for keys already evicted.
    pub fn store_carried(&self, key: u64, state: HierState) {
        let mut g = self.inner.lock();
        if key >= g.first_index {
            g.carried.insert(key, state.detach());
        }
    }

    pub fn fetch_carried(&self, key: u64) -> Option<HierState> {
        self.inner.lock().carried.get(&key).cloned()
    }

    pub fn carried_len(&self) -> usize {
        self.inner.lock().carried.len()
    }

    /// Writes retained steps as `<dir>/<idx>.bin` files of [`CHUNK_STEPS`]
    /// steps. Carried states are not persisted.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (steps, first) = {
            let g = self.inner.lock();
            (g.steps.iter().cloned().collect::<Vec<_>>(), g.first_index)
        };
        fs::create_dir_all(dir)?;
        let mut written = 0;
        for (i, part) in steps.chunks(CHUNK_STEPS).enumerate() {
            let path = dir.join(format!("{i}.bin"));
            write_chunk(&path, first + (i * CHUNK_STEPS) as u64, self.image_size, part)?;
            written += 1;
        }
        for (idx, path) in chunk_files(dir)? {
            if idx >= written {
                fs::remove_file(path)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path, capacity: usize) -> Result<Self> {
        let files = chunk_files(dir)?;
        let mut image_size = None;
        let mut steps: Vec<StepRecord> = Vec::new();
        let mut first_index = None;
        for (_, path) in files {
            let c = read_chunk(&path)?;
            if *image_size.get_or_insert(c.image_size) != c.image_size {
                return Err(Error::format(&path, "image size differs between chunks"));
            }
            let expected = first_index.map(|f: u64| f + steps.len() as u64).unwrap_or(c.first_index);
            if c.first_index != expected {
                return Err(Error::format(&path, format!("chunk starts at {}, expected {expected}", c.first_index)));
            }
            first_index.get_or_insert(c.first_index);
            steps.extend(c.steps);
        }
        let image_size = image_size.ok_or_else(|| Error::format(dir, "no replay chunks"))?;
        let buf = Self::new(capacity, image_size)?;
        {
            let mut g = buf.inner.lock();
            g.first_index = first_index.unwrap_or(0);
            g.prev_terminal = steps.last().is_some_and(|s| s.is_terminal);
            g.steps = steps.into();
            while g.steps.len() > capacity {
                g.steps.pop_front();
                g.first_index += 1;
            }
        }
        Ok(buf)
    }
}

/// Contents of one chunk file.
#[derive(Debug, Clone)]
pub struct ChunkFile {
    pub first_index: u64,
    pub image_size: usize,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChunkMeta {
    first_index: u64,
    image_size: usize,
}

pub fn write_chunk(path: &Path, first_index: u64, image_size: usize, steps: &[StepRecord]) -> Result<()> {
    let n = steps.len();
    let mut images = Vec::with_capacity(n * image_size * image_size * 3);
    for s in steps {
        images.extend_from_slice(&s.image);
    }
    let flag = |f: fn(&StepRecord) -> bool| ArrayData::U8(steps.iter().map(|s| f(s) as u8).collect());
    let arrays = [
        NamedArray::new("image", vec![n, image_size, image_size, 3], ArrayData::U8(images)),
        NamedArray::new("action", vec![n], ArrayData::U32(steps.iter().map(|s| s.action as u32).collect())),
        NamedArray::new("reward", vec![n], ArrayData::F64(steps.iter().map(|s| s.reward).collect())),
        NamedArray::new("is_first", vec![n], flag(|s| s.is_first)),
        NamedArray::new("is_terminal", vec![n], flag(|s| s.is_terminal)),
    ];
    let meta = serde_json::to_value(ChunkMeta { first_index, image_size })?;
    binfmt::write_file(path, CHUNK_KIND, meta, &arrays)
}

pub fn read_chunk(path: &Path) -> Result<ChunkFile> {
    let (header, arrays) = binfmt::read_file(path, CHUNK_KIND)?;
    let meta: ChunkMeta =
        serde_json::from_value(header.meta).map_err(|e| Error::format(path, format!("bad chunk meta: {e}")))?;
    let get = |name: &str| binfmt::take(&arrays, name, path);
    let (ArrayData::U8(images), ArrayData::U32(actions), ArrayData::F64(rewards), ArrayData::U8(first), ArrayData::U8(term)) = (
        &get("image")?.data,
        &get("action")?.data,
        &get("reward")?.data,
        &get("is_first")?.data,
        &get("is_terminal")?.data,
    ) else {
        return Err(Error::format(path, "unexpected array dtypes"));
    };
    let n = actions.len();
    let pix = meta.image_size * meta.image_size * 3;
    if rewards.len() != n || first.len() != n || term.len() != n || images.len() != n * pix {
        return Err(Error::format(path, "array lengths disagree"));
    }
    let steps = (0..n)
        .map(|i| StepRecord {
            image: images[i * pix..(i + 1) * pix].to_vec(),
            action: actions[i] as usize,
            reward: rewards[i],
            is_first: first[i] != 0,
            is_terminal: term[i] != 0,
        })
        .collect();
    Ok(ChunkFile {
        first_index: meta.first_index,
        image_size: meta.image_size,
        steps,
    })
}

/// `(index, path)` of every `<idx>.bin` in `dir`, sorted by index.
pub fn chunk_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("bin") {
            continue;
        }
        if let Some(idx) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok()) {
            out.push((idx, path));
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub chunks: usize,
    pub steps: usize,
    pub episodes: usize,
    pub terminals: usize,
    pub mean_episode_length: f64,
    pub mean_episode_return: f64,
    pub format_version: u32,
    pub corrupt: Vec<String>,
}

/// Summarizes a replay directory. Unreadable chunks are listed, not fatal.
pub fn inspect(dir: &Path) -> Result<InspectReport> {
    let mut report = InspectReport {
        format_version: binfmt::FORMAT_VERSION,
        ..Default::default()
    };
    let mut lengths = Vec::new();
    let mut returns = Vec::new();
    let mut cur: Option<(usize, f64)> = None;
    for (_, path) in chunk_files(dir)? {
        match read_chunk(&path) {
            Err(e) => report.corrupt.push(format!("{}: {e}", path.display())),
            Ok(c) => {
                report.chunks += 1;
                report.steps += c.steps.len();
                for s in &c.steps {
                    if s.is_first {
                        report.episodes += 1;
                        if let Some((l, r)) = cur.take() {
                            lengths.push(l);
                            returns.push(r);
                        }
                        cur = Some((0, 0.0));
                    }
                    if let Some((l, r)) = cur.as_mut() {
                        *l += 1;
                        *r += s.reward;
                    }
                    if s.is_terminal {
                        report.terminals += 1;
                    }
                }
            }
        }
    }
    if let Some((l, r)) = cur {
        lengths.push(l);
        returns.push(r);
    }
    if !lengths.is_empty() {
        report.mean_episode_length = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
        report.mean_episode_return = returns.iter().sum::<f64>() / returns.len() as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Tensor};
    use rand::SeedableRng;

    fn step(i: usize, first: bool, terminal: bool) -> StepRecord {
        StepRecord {
            image: vec![(i % 251) as u8; 2 * 2 * 3],
            action: i % 3,
            reward: i as f64 * 0.5,
            is_first: first,
            is_terminal: terminal,
        }
    }

    fn filled(n: usize, cap: usize) -> ReplayBuffer {
        let b = ReplayBuffer::new(cap, 2).unwrap();
        for i in 0..n {
            b.append(step(i, i % 7 == 0, i % 7 == 6)).unwrap();
        }
        b
    }

    #[test]
    fn fifo_eviction() {
        let b = filled(11, 10);
        assert_eq!(b.len(), 10);
        assert_eq!(b.first_index(), 1);
        assert!(b.get(0).is_none());
        assert_eq!(b.get(10).unwrap().reward, 5.0);
    }

    #[test]
    fn first_forced_after_terminal() {
        let b = ReplayBuffer::new(10, 2).unwrap();
        b.append(step(0, true, true)).unwrap();
        let i = b.append(step(1, false, false)).unwrap();
        assert!(b.get(i).unwrap().is_first);
    }

    #[test]
    fn insufficient_data() {
        let b = filled(63, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            b.sample(1, 64, &mut rng),
            Err(Error::InsufficientData { needed: 64, available: 63 })
        ));
        b.append(step(63, false, false)).unwrap();
        assert!(b.sample(1, 64, &mut rng).is_ok());
    }

    #[test]
    fn seeded_sampling_is_deterministic_and_contiguous() {
        let b = filled(200, 150);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let c1 = b.sample(4, 16, &mut r1).unwrap();
        let c2 = b.sample(4, 16, &mut r2).unwrap();
        assert_eq!(c1.starts, c2.starts);
        assert_eq!(c1.images, c2.images);
        for (bi, start) in c1.starts.iter().enumerate() {
            assert!(*start >= b.first_index());
            for t in 0..16 {
                let global = start + t as u64;
                assert_eq!(c1.rewards[c1.at(bi, t)], global as f64 * 0.5);
                assert_eq!(c1.is_first[c1.at(bi, t)], global.is_multiple_of(7));
            }
        }
    }

    #[test]
    fn start_offsets_are_uniform() {
        let b = filled(40, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let bins = 40 - 8 + 1;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            counts[b.sample(1, 8, &mut rng).unwrap().starts[0] as usize] += 1;
        }
        let expect = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expect).powi(2) / expect).sum();
        // 99.9% quantile of chi-square with 32 degrees of freedom.
        assert!(chi2 < 62.49, "chi2 {chi2}");
    }

    #[test]
    fn carried_states_round_trip_and_evict() {
        let b = filled(10, 10);
        let h = Tensor::new(&[[1.5f64, -2.0]], &Device::Cpu).unwrap();
        let z = Tensor::zeros((1, 1, 2), DType::F64, &Device::Cpu).unwrap();
        let state = HierState {
            layers: vec![crate::ppb::LayerState { h, z, probs: None }],
        };
        assert!(b.fetch_carried(5).is_none());
        b.store_carried(5, state);
        let back = b.fetch_carried(5).unwrap();
        assert_eq!(back.layers[0].h.to_vec2::<f64>().unwrap(), vec![vec![1.5, -2.0]]);
        for i in 10..16 {
            b.append(step(i, false, false)).unwrap();
        }
        assert!(b.fetch_carried(5).is_none());
        assert_eq!(b.carried_len(), 0);
    }

    #[test]
    fn disk_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = ReplayBuffer::new(20_000, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..10_000 {
            let mut s = step(i, rng.random_bool(0.01), rng.random_bool(0.01));
            s.reward = rng.random_range(-1.0..1.0);
            s.image.iter_mut().for_each(|p| *p = rng.random());
            b.append(s).unwrap();
        }
        b.save(dir.path()).unwrap();
        assert_eq!(chunk_files(dir.path()).unwrap().len(), 10);
        let loaded = ReplayBuffer::load(dir.path(), 20_000).unwrap();
        assert_eq!(loaded.len(), 10_000);
        for i in 0..10_000u64 {
            assert_eq!(loaded.get(i), b.get(i));
        }
        let first: Vec<Vec<u8>> = chunk_files(dir.path())
            .unwrap()
            .iter()
            .map(|(_, p)| fs::read(p).unwrap())
            .collect();
        loaded.save(dir.path()).unwrap();
        let second: Vec<Vec<u8>> = chunk_files(dir.path())
            .unwrap()
            .iter()
            .map(|(_, p)| fs::read(p).unwrap())
            .collect();
        assert_eq!(first, second);
    }

    #[test]
    fn corrupt_and_versioned_chunks_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let b = filled(5, 10);
        b.save(dir.path()).unwrap();
        let path = dir.path().join("0.bin");
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|c| *c == b'\n').unwrap()]).to_string();
        let bumped = text.replace("\"version\":1", "\"version\":2");
        let mut v = bumped.into_bytes();
        v.extend_from_slice(&bytes[bytes.iter().position(|c| *c == b'\n').unwrap()..]);
        fs::write(&path, &v).unwrap();
        assert!(matches!(ReplayBuffer::load(dir.path(), 10), Err(Error::Format { .. })));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(ReplayBuffer::load(dir.path(), 10), Err(Error::Format { .. })));
    }

    #[test]
    fn inspect_counts() {
        let dir = tempfile::tempdir().unwrap();
        let empty = inspect(dir.path()).unwrap();
        assert_eq!((empty.chunks, empty.steps, empty.episodes), (0, 0, 0));
        let b = filled(2100, 5000);
        b.save(dir.path()).unwrap();
        fs::write(dir.path().join("7.bin"), b"junk").unwrap();
        let r = inspect(dir.path()).unwrap();
        assert_eq!(r.chunks, 3);
        assert_eq!(r.steps, 2100);
        assert_eq!(r.episodes, 300);
        assert_eq!(r.terminals, 300);
        assert_eq!(r.mean_episode_length, 7.0);
        assert_eq!(r.corrupt.len(), 1);
    }

    #[test]
    fn concurrent_append_and_sample() {
        let b = std::sync::Arc::new(ReplayBuffer::new(500, 2).unwrap());
        for i in 0..32 {
            b.append(step(i, i == 0, false)).unwrap();
        }
        let writer = {
            let b = b.clone();
            std::thread::spawn(move || {
                for i in 32..3000 {
                    b.append(step(i, false, false)).unwrap();
                }
            })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let c = b.sample(2, 16, &mut rng).unwrap();
            for (bi, start) in c.starts.iter().enumerate() {
                for t in 0..16 {
                    assert_eq!(c.rewards[c.at(bi, t)], (start + t as u64) as f64 * 0.5);
                }
            }
        }
        writer.join().unwrap();
        assert_eq!(b.len(), 500);
    }
}
