//! Environment interface, the DodgeWorld pixel task and small helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Observation carrier. `image` is `(h, w, 3)` bytes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub image: Vec<u8>,
    pub reward: f64,
    pub is_first: bool,
    pub is_last: bool,
    pub is_terminal: bool,
}

impl EnvStep {
    /// Continuation flag: zero only on true termination.
    pub fn cont(&self) -> f64 {
        if self.is_terminal {
            0.0
        } else {
            1.0
        }
    }
}

pub trait Environment: Send {
    fn num_actions(&self) -> usize;
    /// Native `(height, width)` of observations.
    fn image_shape(&self) -> (usize, usize);
    fn reset(&mut self, seed: u64) -> Result<EnvStep>;
    fn step(&mut self, action: usize) -> Result<EnvStep>;
    /// Whether the episode that just ended counts as a success.
    fn success(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DodgeConfig {
    pub grid: usize,
    pub cell_px: usize,
    pub spawn_prob: f64,
    pub telegraph_steps: usize,
    pub max_steps: usize,
    pub survive_reward: f64,
    pub hit_reward: f64,
}

impl Default for DodgeConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            cell_px: 2,
            spawn_prob: 0.25,
            telegraph_steps: 3,
            max_steps: 200,
            survive_reward: 0.1,
            hit_reward: -1.0,
        }
    }
}

impl DodgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.cell_px == 0 || self.max_steps == 0 {
            return Err(Error::Config("dodgeworld grid, cell size and episode length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.spawn_prob) {
            return Err(Error::Config("dodgeworld spawn probability must lie in [0,1]".into()));
        }
        Ok(())
    }
}

pub const LEFT: usize = 0;
pub const STAY: usize = 1;
pub const RIGHT: usize = 2;

pub const BLACK: [u8; 3] = [0, 0, 0];
pub const WHITE: [u8; 3] = [255, 255, 255];
pub const YELLOW: [u8; 3] = [255, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Shown on the top row; the value counts remaining telegraph steps.
    Telegraph(usize),
    Falling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projectile {
    pub col: usize,
    pub row: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone)]
pub struct DodgeState {
    pub agent_col: usize,
    pub projectiles: Vec<Projectile>,
    pub step_count: usize,
    pub hit: bool,
}

/// 16x16 grid dodging game. Each step a projectile may appear in a free top
/// column, blink yellow for a few steps, then fall one row per step in red.
/// Touching the agent's cell on the bottom row ends the episode.
#[derive(Debug, Clone)]
pub struct DodgeWorld {
    cfg: DodgeConfig,
    state: DodgeState,
    rng: ChaCha8Rng,
    done: bool,
}

impl DodgeWorld {
    pub fn new(cfg: DodgeConfig) -> Result<Self> {
        cfg.validate()?;
        let state = DodgeState {
            agent_col: cfg.grid / 2,
            projectiles: Vec::new(),
            step_count: 0,
            hit: false,
        };
        Ok(Self {
            cfg,
            state,
            rng: ChaCha8Rng::seed_from_u64(0),
            done: true,
        })
    }

    pub fn config(&self) -> &DodgeConfig {
        &self.cfg
    }

    pub fn state(&self) -> &DodgeState {
        &self.state
    }

    /// Replaces the internal state; used by tests and scripted scenarios.
    pub fn set_state(&mut self, state: DodgeState) {
        self.state = state;
        self.done = false;
    }

    pub fn render(&self) -> Vec<u8> {
        render(&self.cfg, &self.state)
    }

    fn obs(&self, reward: f64, is_first: bool, is_last: bool, is_terminal: bool) -> EnvStep {
        EnvStep {
            image: self.render(),
            reward,
            is_first,
            is_last,
            is_terminal,
        }
    }

    /// Steps until each projectile reaches the bottom row, paired with its
    /// column, measured from the current state.
    pub fn arrivals(&self) -> Vec<(usize, usize)> {
        let bottom = self.cfg.grid - 1;
        self.state
            .projectiles
            .iter()
            .filter(|p| !(p.phase == Phase::Falling && p.row == bottom))
            .map(|p| {
                let steps = match p.phase {
                    Phase::Telegraph(left) => left + bottom - 1,
                    Phase::Falling => bottom - p.row,
                };
                (p.col, steps)
            })
            .collect()
    }
}

pub fn render(cfg: &DodgeConfig, s: &DodgeState) -> Vec<u8> {
    let side = cfg.grid * cfg.cell_px;
    let mut img = vec![0u8; side * side * 3];
    let mut paint = |row: usize, col: usize, rgb: [u8; 3]| {
        for dy in 0..cfg.cell_px {
            for dx in 0..cfg.cell_px {
                let y = row * cfg.cell_px + dy;
                let x = col * cfg.cell_px + dx;
                let o = (y * side + x) * 3;
                img[o..o + 3].copy_from_slice(&rgb);
            }
        }
    };
    for p in &s.projectiles {
        let rgb = match p.phase {
            Phase::Telegraph(_) => YELLOW,
            Phase::Falling => RED,
        };
        paint(p.row, p.col, rgb);
    }
    paint(cfg.grid - 1, s.agent_col, WHITE);
    img
}

impl Environment for DodgeWorld {
    fn num_actions(&self) -> usize {
        3
    }

    fn image_shape(&self) -> (usize, usize) {
        let side = self.cfg.grid * self.cfg.cell_px;
        (side, side)
    }

    fn reset(&mut self, seed: u64) -> Result<EnvStep> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = DodgeState {
            agent_col: self.cfg.grid / 2,
            projectiles: Vec::new(),
            step_count: 0,
            hit: false,
        };
        self.done = false;
        Ok(self.obs(0.0, true, false, false))
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if action > RIGHT {
            return Err(Error::contract(format!("dodgeworld action {action} out of range")));
        }
        if self.done {
            return Err(Error::contract("dodgeworld stepped after episode end; call reset"));
        }
        let bottom = self.cfg.grid - 1;
        let s = &mut self.state;
        s.agent_col = match action {
            LEFT => s.agent_col.saturating_sub(1),
            RIGHT => (s.agent_col + 1).min(bottom),
            _ => s.agent_col,
        };

        s.projectiles.retain(|p| !(p.phase == Phase::Falling && p.row == bottom));
        for p in &mut s.projectiles {
            match p.phase {
                Phase::Telegraph(1) => {
                    p.phase = Phase::Falling;
                    p.row = 1;
                }
                Phase::Telegraph(n) => p.phase = Phase::Telegraph(n - 1),
                Phase::Falling => p.row += 1,
            }
        }
        let hit = s
            .projectiles
            .iter()
            .any(|p| p.phase == Phase::Falling && p.row == bottom && p.col == s.agent_col);

        if self.rng.random_bool(self.cfg.spawn_prob) {
            let free: Vec<usize> = (0..self.cfg.grid)
                .filter(|c| s.projectiles.iter().all(|p| p.col != *c))
                .collect();
            if !free.is_empty() {
                let col = free[self.rng.random_range(0..free.len())];
                let phase = if self.cfg.telegraph_steps == 0 {
                    Phase::Falling
                } else {
                    Phase::Telegraph(self.cfg.telegraph_steps)
                };
                s.projectiles.push(Projectile { col, row: 0, phase });
            }
        }

        s.step_count += 1;
        s.hit = hit;
        let truncated = !hit && s.step_count >= self.cfg.max_steps;
        self.done = hit || truncated;
        let reward = if hit { self.cfg.hit_reward } else { self.cfg.survive_reward };
        Ok(self.obs(reward, false, self.done, hit))
    }

    fn success(&self) -> bool {
        self.done && !self.state.hit && self.state.step_count >= self.cfg.max_steps
    }
}

/// Scripted policy that reads the true state: among the three moves it
/// picks one from which some move sequence dodges every projectile already
/// on screen, preferring the move that ends closest to the centre.
pub fn clairvoyant_action(env: &DodgeWorld) -> usize {
    let grid = env.cfg.grid;
    let arrivals = env.arrivals();
    let horizon = arrivals.iter().map(|(_, t)| *t).max().unwrap_or(0);
    let mut danger = vec![vec![false; grid]; horizon + 1];
    for (col, t) in &arrivals {
        danger[*t][*col] = true;
    }
    // safe[t][c]: standing in column c after t steps can be continued
    // without a hit until every known projectile has landed.
    let mut safe = vec![vec![true; grid]; horizon + 2];
    for t in (1..=horizon).rev() {
        for c in 0..grid {
            let next_ok = [c.saturating_sub(1), c, (c + 1).min(grid - 1)]
                .iter()
                .any(|n| safe[t + 1][*n]);
            safe[t][c] = !danger[t][c] && next_ok;
        }
    }
    let col = env.state.agent_col;
    let centre = grid / 2;
    let target = |a: usize| match a {
        LEFT => col.saturating_sub(1),
        RIGHT => (col + 1).min(grid - 1),
        _ => col,
    };
    let mut options: Vec<usize> = [STAY, LEFT, RIGHT].into_iter().filter(|a| safe[1][target(*a)]).collect();
    if options.is_empty() {
        return STAY;
    }
    options.sort_by_key(|a| (target(*a).abs_diff(centre), *a != STAY));
    options[0]
}

/// Fixed-image environment with zero reward and fixed-length episodes.
#[derive(Debug, Clone)]
pub struct ConstantEnv {
    pub size: usize,
    pub value: [u8; 3],
    pub episode_length: usize,
    pub num_actions: usize,
    t: usize,
}

impl ConstantEnv {
    pub fn new(size: usize, value: [u8; 3], episode_length: usize, num_actions: usize) -> Self {
        Self {
            size,
            value,
            episode_length,
            num_actions,
            t: 0,
        }
    }

    fn image(&self) -> Vec<u8> {
        self.value.iter().copied().cycle().take(self.size * self.size * 3).collect()
    }
}

impl Environment for ConstantEnv {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    fn reset(&mut self, _seed: u64) -> Result<EnvStep> {
        self.t = 0;
        Ok(EnvStep {
            image: self.image(),
            reward: 0.0,
            is_first: true,
            is_last: false,
            is_terminal: false,
        })
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if action >= self.num_actions {
            return Err(Error::contract(format!("action {action} out of range")));
        }
        self.t += 1;
        Ok(EnvStep {
            image: self.image(),
            reward: 0.0,
            is_first: false,
            is_last: self.t >= self.episode_length,
            is_terminal: false,
        })
    }

    fn success(&self) -> bool {
        self.t >= self.episode_length
    }
}

/// Wraps an environment and maps its frames to a square `size` by
/// centre-cropping to a square and resampling with nearest neighbour.
pub struct Resized<E> {
    inner: E,
    size: usize,
}

impl<E: Environment> Resized<E> {
    pub fn new(inner: E, size: usize) -> Self {
        Self { inner, size }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    fn map(&self, mut s: EnvStep) -> EnvStep {
        let (h, w) = self.inner.image_shape();
        if h == self.size && w == self.size {
            return s;
        }
        s.image = resize_square(&s.image, h, w, self.size);
        s
    }
}

pub fn resize_square(image: &[u8], h: usize, w: usize, size: usize) -> Vec<u8> {
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let mut out = vec![0u8; size * size * 3];
    for y in 0..size {
        let sy = y0 + y * side / size;
        for x in 0..size {
            let sx = x0 + x * side / size;
            let src = (sy * w + sx) * 3;
            let dst = (y * size + x) * 3;
            out[dst..dst + 3].copy_from_slice(&image[src..src + 3]);
        }
    }
    out
}

impl<E: Environment> Environment for Resized<E> {
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    fn reset(&mut self, seed: u64) -> Result<EnvStep> {
        let s = self.inner.reset(seed)?;
        Ok(self.map(s))
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        let s = self.inner.step(action)?;
        Ok(self.map(s))
    }

    fn success(&self) -> bool {
        self.inner.success()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// `dodgeworld` or `constant`.
    pub id: String,
    pub dodge: DodgeConfig,
    pub constant_value: [u8; 3],
    pub constant_episode_length: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            id: "dodgeworld".into(),
            dodge: DodgeConfig::default(),
            constant_value: [96, 160, 32],
            constant_episode_length: 100,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        match self.id.as_str() {
            "dodgeworld" => self.dodge.validate(),
            "constant" if self.constant_episode_length > 0 => Ok(()),
            "constant" => Err(Error::Config("constant env needs a positive episode length".into())),
            other => Err(Error::Config(format!("unknown environment {other:?}"))),
        }
    }
}

/// Builds the configured environment, resized to `size`.
pub fn make_env(cfg: &EnvConfig, size: usize, num_actions: usize) -> Result<Box<dyn Environment>> {
    cfg.validate()?;
    Ok(match cfg.id.as_str() {
        "dodgeworld" => Box::new(Resized::new(DodgeWorld::new(cfg.dodge.clone())?, size)),
        _ => Box::new(ConstantEnv::new(size, cfg.constant_value, cfg.constant_episode_length, num_actions)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> DodgeWorld {
        let mut w = DodgeWorld::new(DodgeConfig::default()).unwrap();
        w.reset(0).unwrap();
        w
    }

    fn pixel(img: &[u8], side: usize, y: usize, x: usize) -> [u8; 3] {
        let o = (y * side + x) * 3;
        [img[o], img[o + 1], img[o + 2]]
    }

    fn no_spawn() -> DodgeConfig {
        DodgeConfig {
            spawn_prob: 0.0,
            ..DodgeConfig::default()
        }
    }

    #[test]
    fn movement_and_wall_clamp() {
        let mut w = DodgeWorld::new(no_spawn()).unwrap();
        w.reset(0).unwrap();
        w.state.agent_col = 3;
        w.step(LEFT).unwrap();
        assert_eq!(w.state().agent_col, 2);
        w.state.agent_col = 0;
        w.step(LEFT).unwrap();
        assert_eq!(w.state().agent_col, 0);
        w.state.agent_col = 15;
        w.step(RIGHT).unwrap();
        assert_eq!(w.state().agent_col, 15);
        assert!(matches!(w.step(3), Err(Error::Contract(_))));
    }

    #[test]
    fn projectile_above_agent_hits() {
        let mut w = DodgeWorld::new(no_spawn()).unwrap();
        w.reset(0).unwrap();
        w.set_state(DodgeState {
            agent_col: 5,
            projectiles: vec![Projectile { col: 5, row: 14, phase: Phase::Falling }],
            step_count: 10,
            hit: false,
        });
        let s = w.step(STAY).unwrap();
        assert_eq!(s.reward, -1.0);
        assert!(s.is_terminal && s.is_last);
        assert_eq!(s.cont(), 0.0);
        assert!(!w.success());
    }

    #[test]
    fn telegraph_then_fall_timing() {
        let mut w = DodgeWorld::new(no_spawn()).unwrap();
        w.reset(0).unwrap();
        w.set_state(DodgeState {
            agent_col: 0,
            projectiles: vec![Projectile { col: 9, row: 0, phase: Phase::Telegraph(3) }],
            step_count: 0,
            hit: false,
        });
        assert_eq!(w.arrivals(), vec![(9, 17)]);
        w.step(STAY).unwrap();
        w.step(STAY).unwrap();
        assert_eq!(w.state().projectiles[0].phase, Phase::Telegraph(1));
        w.step(STAY).unwrap();
        assert_eq!(w.state().projectiles[0], Projectile { col: 9, row: 1, phase: Phase::Falling });
        for _ in 0..14 {
            w.step(STAY).unwrap();
        }
        assert_eq!(w.state().projectiles[0].row, 15);
        w.step(STAY).unwrap();
        assert!(w.state().projectiles.is_empty());
    }

    #[test]
    fn truncation_is_not_terminal() {
        let mut w = DodgeWorld::new(DodgeConfig { max_steps: 5, ..no_spawn() }).unwrap();
        let first = w.reset(1).unwrap();
        assert!(first.is_first && first.reward == 0.0);
        let mut last = first;
        for _ in 0..5 {
            last = w.step(STAY).unwrap();
        }
        assert!(last.is_last && !last.is_terminal);
        assert_eq!(last.cont(), 1.0);
        assert!(w.success());
        assert!(w.step(STAY).is_err());
    }

    #[test]
    fn render_colours() {
        let w = world();
        let img = w.render();
        let side = 32;
        let agent_px = (0..side * side)
            .filter(|i| pixel(&img, side, i / side, i % side) == WHITE)
            .count();
        assert_eq!(agent_px, 4);
        assert_eq!(img.iter().filter(|v| **v != 0).count(), 4 * 3);
        assert_eq!(pixel(&img, side, 30, 16), WHITE);

        let state = DodgeState {
            agent_col: 2,
            projectiles: vec![
                Projectile { col: 4, row: 7, phase: Phase::Falling },
                Projectile { col: 6, row: 0, phase: Phase::Telegraph(2) },
            ],
            step_count: 0,
            hit: false,
        };
        let img = render(&DodgeConfig::default(), &state);
        assert_eq!(pixel(&img, side, 14, 8), RED);
        assert_eq!(pixel(&img, side, 15, 9), RED);
        assert_eq!(pixel(&img, side, 0, 12), YELLOW);
        assert_eq!(render(&DodgeConfig::default(), &state), img);
    }

    #[test]
    fn seeded_episodes_are_identical() {
        let run = |seed| {
            let mut w = DodgeWorld::new(DodgeConfig::default()).unwrap();
            let mut frames = vec![w.reset(seed).unwrap().image];
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            loop {
                let s = w.step(rng.random_range(0..3)).unwrap();
                frames.push(s.image);
                if s.is_last {
                    break frames;
                }
            }
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn at_most_one_projectile_per_column() {
        let mut w = DodgeWorld::new(DodgeConfig { spawn_prob: 1.0, ..DodgeConfig::default() }).unwrap();
        w.reset(0).unwrap();
        for _ in 0..60 {
            if w.step(clairvoyant_action(&w)).unwrap().is_last {
                break;
            }
            let mut cols: Vec<usize> = w.state().projectiles.iter().map(|p| p.col).collect();
            let n = cols.len();
            cols.sort();
            cols.dedup();
            assert_eq!(cols.len(), n);
        }
    }

    #[test]
    fn constant_env_and_resize() {
        let mut e = ConstantEnv::new(8, [1, 2, 3], 3, 2);
        let s = e.reset(0).unwrap();
        assert_eq!(&s.image[..6], &[1, 2, 3, 1, 2, 3]);
        e.step(1).unwrap();
        e.step(0).unwrap();
        let s = e.step(0).unwrap();
        assert!(s.is_last && !s.is_terminal);

        let mut big = Resized::new(DodgeWorld::new(DodgeConfig::default()).unwrap(), 16);
        let s = big.reset(0).unwrap();
        assert_eq!(s.image.len(), 16 * 16 * 3);
        assert_eq!(pixel(&s.image, 16, 15, 8), WHITE);
        let wide: Vec<u8> = (0..4 * 8 * 3).map(|i| (i / 3) as u8).collect();
        let sq = resize_square(&wide, 4, 8, 2);
        assert_eq!(sq[0], 2);
    }
}
