//! Command-line driver: train, evaluate, render foresight strips and
//! inspect replay directories. Every command ends with one JSON line on
//! stdout; failures also exit nonzero.

mod strip;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resdreamer::config::TrainConfig;
use resdreamer::envs::make_env;
use resdreamer::pipeline::{evaluate, latest_checkpoint, load_checkpoint, run, Checkpoint, RunOptions};
use resdreamer::replay;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "resdreamer", version, about = "Hierarchical residual world-model agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config, writing metrics and checkpoints to a log directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        logdir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Dotted-key override, e.g. `--set hrssm.layers=3`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from the latest checkpoint in the log directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run frozen-parameter episodes and report success rate, score and length.
    Eval {
        /// A checkpoint directory or a log directory holding `ckpt/`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write one PNG strip per step: observation, hint frames, residuals.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a replay directory.
    ReplayInspect {
        #[arg(long)]
        dir: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Viz { .. } => "viz",
            Command::ReplayInspect { .. } => "replay-inspect",
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match dispatch(cli.command) {
        Ok(mut summary) => {
            summary["command"] = name.into();
            println!("{summary}");
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            println!("{}", json!({ "command": name, "error": format!("{e:#}") }));
            std::process::exit(1);
        }
    }
}

fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Train {
            config,
            logdir,
            seed,
            overrides,
            resume,
        } => train(&config, &logdir, seed, &overrides, resume),
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let mut ck = open_checkpoint(&checkpoint)?;
            let cfg = ck.manifest.config.clone();
            let summary = evaluate(&mut ck.agent.model, &cfg, episodes, seed)?;
            let mut v = serde_json::to_value(summary)?;
            v["checkpoint"] = ck.manifest.label.into();
            Ok(v)
        }
        Command::Viz {
            checkpoint,
            episodes,
            out,
            seed,
        } => viz(&checkpoint, episodes, &out, seed),
        Command::ReplayInspect { dir } => {
            let report = replay::inspect(&dir).with_context(|| format!("inspecting {}", dir.display()))?;
            Ok(serde_json::to_value(report)?)
        }
    }
}

fn train(config: &Path, logdir: &Path, seed: Option<u64>, overrides: &[String], resume: bool) -> Result<Value> {
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("seed={s}"));
    }
    let cfg = TrainConfig::load(config)
        .with_context(|| format!("loading {}", config.display()))?
        .with_overrides(&all)?;
    let opts = RunOptions {
        resume,
        stop_after: None,
    };
    let summary = run(&cfg, logdir, &opts)?;
    let mut v = serde_json::to_value(summary)?;
    v["logdir"] = logdir.display().to_string().into();
    Ok(v)
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    let dir = if path.join("manifest.json").is_file() {
        path.to_path_buf()
    } else {
        match latest_checkpoint(path)? {
            Some(d) => d,
            None => bail!("no checkpoint found at {}", path.display()),
        }
    };
    load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn host(t: &candle_core::Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

fn viz(checkpoint: &Path, episodes: usize, out: &Path, seed: u64) -> Result<Value> {
    let ck = open_checkpoint(checkpoint)?;
    let cfg = ck.manifest.config.clone();
    let mut model = ck.agent.model;
    let (layers, frames, size) = (cfg.hrssm.layers, cfg.hrssm.frames, cfg.hrssm.image_size);
    let plane = 3 * size * size;
    std::fs::create_dir_all(out)?;
    let mut env = make_env(&cfg.env, size, cfg.hrssm.num_actions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blank = vec![0f32; plane];
    let mut written = 0usize;
    for ep in 0..episodes {
        let mut obs = env.reset(seed.wrapping_mul(7_919).wrapping_add(ep as u64))?;
        let mut state = model.initial_state(1)?;
        let (mut prev, mut first) = (0, true);
        for t in 0.. {
            let step = model.observe_frames(&state, &[prev], &obs.image, &[first], &mut rng)?;
            let mut owned: Vec<Vec<f32>> = Vec::with_capacity(layers * frames + layers);
            for e in &step.enhanced {
                match &e.hint {
                    Some(h) => {
                        let v = host(h)?;
                        owned.extend(v.chunks(plane).map(<[f32]>::to_vec));
                    }
                    None => owned.extend((0..frames).map(|_| blank.clone())),
                }
            }
            for r in &step.residuals {
                owned.push(host(r)?);
            }
            while owned.len() < strip::panel_count(layers, frames) - 1 {
                owned.push(blank.clone());
            }
            let panels: Vec<strip::Panel> = owned.iter().map(|d| strip::Panel { data: d }).collect();
            let img = strip::render(&obs.image, size, &panels);
            let path = out.join(format!("ep{ep}_t{t}.png"));
            img.save(&path).with_context(|| format!("writing {}", path.display()))?;
            written += 1;

            let a = model.choose(&step.state, true, &mut rng)?[0];
            state = step.state.detach();
            obs = env.step(a)?;
            prev = a;
            first = false;
            if obs.is_last {
                break;
            }
        }
    }
    Ok(json!({
        "out": out.display().to_string(),
        "images": written,
        "strip_width": size * strip::panel_count(layers, frames),
        "strip_height": size,
    }))
}
