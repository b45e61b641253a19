#![allow(dead_code)]

use resdreamer::config::TrainConfig;
use resdreamer::pipeline::{Collector, Model};
use resdreamer::replay::ReplayBuffer;

/// A model small enough for whole training runs inside a test.
pub fn tiny(extra: &[&str]) -> TrainConfig {
    let mut over = vec![
        "hrssm.image_size=8",
        "hrssm.h_size=16",
        "hrssm.latent_groups=4",
        "hrssm.latent_classes=4",
        "hrssm.cnn_base_channels=4",
        "hrssm.decoder_base_channels=4",
        "hrssm.hidden_size=16",
        "behavior.hidden_size=16",
        "behavior.imagination_horizon=5",
        "loop.batch_size=2",
        "loop.batch_length=8",
        "loop.buffer_size=10000",
        "loop.prefill=32",
        "loop.train_ratio=1.0",
        "loop.checkpoint_every=0",
        "loop.eval_every=0",
        "loop.eval_episodes=1",
        "loop.synchronous=true",
    ];
    over.extend_from_slice(extra);
    TrainConfig::default().with_overrides(&over).expect("tiny overrides are valid")
}

/// A buffer with `steps` random-action steps collected under `cfg`.
pub fn filled_buffer(cfg: &TrainConfig, model: &Model, steps: usize) -> ReplayBuffer {
    let buffer = ReplayBuffer::new(cfg.run.buffer_size, cfg.hrssm.image_size).unwrap();
    let mut collector = Collector::new(cfg, 0).unwrap();
    let mut acting = model.snapshot(cfg).unwrap();
    for _ in 0..steps {
        collector.step(&mut acting, &buffer, true).unwrap();
    }
    buffer
}

pub fn read_lines(path: &std::path::Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn count_kind(records: &[serde_json::Value], kind: &str) -> usize {
    records.iter().filter(|r| r["kind"] == kind).count()
}

/// Lambda-return at every position written out as the explicit weighted
/// sum of n-step returns. `r[i]`/`c[i]` belong to the transition into step
/// `i + 1`; the last entry is the bootstrap value.
pub fn brute_lambda(r: &[f64], c: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let t_max = r.len();
    let n_step = |t: usize, n: usize| {
        let mut g = 0.0;
        let mut disc = 1.0;
        for k in 0..n {
            g += disc * r[t + k];
            disc *= gamma * c[t + k];
        }
        g + disc * v[t + n]
    };
    (0..=t_max)
        .map(|t| {
            let horizon = t_max - t;
            if horizon == 0 {
                return v[t];
            }
            let mut total = 0.0;
            for n in 1..horizon {
                total += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(t, n);
            }
            total + lambda.powi(horizon as i32 - 1) * n_step(t, horizon)
        })
        .collect()
}
