//! Reward/continue heads, actor and critic, and every training loss.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hrssm::{HierState, LayerLosses};
use crate::nn::{self, Init, Mlp, ParamStore};
use crate::numerics::{categorical_entropy, softmax_last, symexp_tensor, unimix_categorical, TwohotCodec};
use crate::ppb::{ActionProvider, Categorical, LayerState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorConfig {
    pub hidden_size: usize,
    pub mlp_layers: usize,
    pub bins: usize,
    pub bin_low: f64,
    pub bin_high: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coeff: f64,
    pub slow_critic_rate: f64,
    pub slow_critic_reg: f64,
    pub replay_value_scale: f64,
    pub return_scale_decay: f64,
    pub imagination_horizon: usize,
    /// Heads read every layer's state instead of layer 0 only.
    pub stacked_features: bool,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            hidden_size: 256,
            mlp_layers: 2,
            bins: 255,
            bin_low: -20.0,
            bin_high: 20.0,
            gamma: 1.0 - 1.0 / 333.0,
            lambda: 0.95,
            entropy_coeff: 3e-4,
            slow_critic_rate: 0.02,
            slow_critic_reg: 1.0,
            replay_value_scale: 0.3,
            return_scale_decay: 0.99,
            imagination_horizon: 15,
            stacked_features: false,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.gamma) || !unit(self.lambda) || !unit(self.return_scale_decay) {
            return Err(Error::Config("gamma, lambda and return decay must lie in (0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.slow_critic_rate) {
            return Err(Error::Config("slow critic rate must lie in [0,1]".into()));
        }
        if self.bins < 2 || !(self.bin_low < self.bin_high) {
            return Err(Error::Config("twohot needs >= 2 bins over a non-empty range".into()));
        }
        if self.hidden_size == 0 || self.imagination_horizon == 0 {
            return Err(Error::Config("behavior sizes must be positive".into()));
        }
        if self.entropy_coeff < 0.0 || self.slow_critic_reg < 0.0 || self.replay_value_scale < 0.0 {
            return Err(Error::Config("loss scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn codec(&self) -> Result<TwohotCodec> {
        TwohotCodec::symexp_spaced(self.bins, self.bin_low, self.bin_high)
    }
}

fn centers_tensor(codec: &TwohotCodec, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(codec.bin_centers(), (codec.bins(), 1), device)?.to_dtype(dtype)?)
}

/// Value-space mean of twohot logits `(N, bins)`, decoded from the plain
/// softmax.
pub fn twohot_mean(codec: &TwohotCodec, logits: &Tensor) -> Result<Tensor> {
    let probs = softmax_last(logits)?;
    let y = probs.matmul(&centers_tensor(codec, logits.dtype(), logits.device())?)?.squeeze(1)?;
    symexp_tensor(&y)
}

/// Twohot targets `(values.len(), bins)`.
pub fn twohot_targets(codec: &TwohotCodec, values: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    let flat = codec.encode_batch(values)?;
    Ok(Tensor::from_vec(flat, (values.len(), codec.bins()), device)?.to_dtype(dtype)?)
}

/// `-sum(target * log p)` per row with `p` the unimixed softmax of `logits`.
pub fn twohot_nll(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (_, logp) = unimix_categorical(logits)?;
    Ok(targets.mul(&logp)?.sum(D::Minus1)?.neg()?)
}

/// `-[c log sigmoid(x) + (1-c) log sigmoid(-x)]` per element.
pub fn bernoulli_nll(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = nn::log_sigmoid(logits)?;
    let neg = nn::log_sigmoid(&logits.neg()?)?;
    let inv = targets.affine(-1.0, 1.0)?;
    Ok((targets.mul(&pos)? + inv.mul(&neg)?)?.neg()?)
}

/// Reward and continuation predictors; trained with the world model.
#[derive(Debug, Clone)]
pub struct Heads {
    reward: Mlp,
    cont: Mlp,
    codec: TwohotCodec,
}

impl Heads {
    pub fn new(init: &mut Init, features: usize, cfg: &BehaviorConfig) -> Result<Self> {
        Ok(Self {
            reward: Mlp::new(&mut init.sub("reward"), features, cfg.hidden_size, cfg.mlp_layers, cfg.bins, true)?,
            cont: Mlp::new(&mut init.sub("cont"), features, cfg.hidden_size, cfg.mlp_layers, 1, false)?,
            codec: cfg.codec()?,
        })
    }

    pub fn reward_logits(&self, features: &Tensor) -> Result<Tensor> {
        self.reward.forward(features)
    }

    pub fn reward_mean(&self, features: &Tensor) -> Result<Tensor> {
        twohot_mean(&self.codec, &self.reward_logits(features)?)
    }

    pub fn cont_logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.cont.forward(features)?.squeeze(D::Minus1)?)
    }

    pub fn cont_prob(&self, features: &Tensor) -> Result<Tensor> {
        nn::sigmoid(&self.cont_logits(features)?)
    }

    pub fn codec(&self) -> &TwohotCodec {
        &self.codec
    }
}

#[derive(Debug, Clone)]
pub struct Actor {
    net: Mlp,
    num_actions: usize,
}

impl Actor {
    pub fn new(init: &mut Init, features: usize, num_actions: usize, cfg: &BehaviorConfig) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(&mut init.sub("actor"), features, cfg.hidden_size, cfg.mlp_layers, num_actions, true)?,
            num_actions,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Unimixed categorical over actions, `(N, A)`.
    pub fn dist(&self, features: &Tensor) -> Result<Categorical> {
        Categorical::from_logits(&self.net.forward(features)?)
    }

    /// Samples (or takes the argmax when `greedy`) one action per row.
    pub fn choose(&self, features: &Tensor, greedy: bool, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let probs = self.dist(&features.detach())?.probs.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(probs
            .iter()
            .map(|row| {
                if greedy {
                    argmax(row)
                } else {
                    sample_index(row, rng)
                }
            })
            .collect())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn sample_index(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if acc > u {
            return i;
        }
    }
    row.len() - 1
}

/// Actor-driven action provider for hint rollouts and imagination.
pub struct ActorPolicy<'a> {
    pub actor: &'a Actor,
    pub stacked: bool,
    pub greedy: bool,
}

impl ActionProvider for ActorPolicy<'_> {
    fn act(&mut self, states: &[LayerState], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let feats = HierState { layers: states.to_vec() }.features(self.stacked)?;
        let idx = self.actor.choose(&feats, self.greedy, rng)?;
        nn::one_hot(&idx, self.actor.num_actions, feats.dtype(), feats.device())
    }
}

#[derive(Debug, Clone)]
pub struct Critic {
    net: Mlp,
    codec: TwohotCodec,
}

impl Critic {
    pub fn new(init: &mut Init, features: usize, cfg: &BehaviorConfig) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(&mut init.sub("critic"), features, cfg.hidden_size, cfg.mlp_layers, cfg.bins, true)?,
            codec: cfg.codec()?,
        })
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        self.net.forward(features)
    }

    pub fn mean(&self, features: &Tensor) -> Result<Tensor> {
        twohot_mean(&self.codec, &self.logits(features)?)
    }

    pub fn codec(&self) -> &TwohotCodec {
        &self.codec
    }
}

/// `slow <- (1 - rate) slow + rate fast`, parameter by parameter.
pub fn slow_critic_update(fast: &ParamStore, slow: &ParamStore, rate: f64) -> Result<()> {
    if fast.len() != slow.len() {
        return Err(Error::contract("slow critic shape mismatch"));
    }
    for ((fname, f), (sname, s)) in fast.named().zip(slow.named()) {
        if fname != sname || f.dims() != s.dims() {
            return Err(Error::contract(format!("slow critic mismatch at {fname} / {sname}")));
        }
        let mixed = ((s.as_tensor() * (1.0 - rate))? + (f.as_tensor() * rate)?)?;
        s.set(&mixed.detach())?;
    }
    Ok(())
}

/// Bootstrapped lambda-returns. `values` carries one more entry than
/// `rewards`; the result has the same length as `values` and ends with the
/// bootstrap value itself.
pub fn lambda_returns(rewards: &[f64], continues: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let t = rewards.len();
    if continues.len() != t || values.len() != t + 1 {
        return Err(Error::contract(format!(
            "lambda_returns lengths: rewards {t}, continues {}, values {}",
            continues.len(),
            values.len()
        )));
    }
    let mut out = vec![0.0; t + 1];
    out[t] = values[t];
    for i in (0..t).rev() {
        out[i] = rewards[i] + gamma * continues[i] * ((1.0 - lambda) * values[i + 1] + lambda * out[i + 1]);
    }
    Ok(out)
}

/// `(R - v) / max(1, scale)`.
pub fn normalized_advantages(returns: &[f64], values: &[f64], scale: f64) -> Result<Vec<f64>> {
    if returns.len() != values.len() {
        return Err(Error::contract("advantage lengths differ"));
    }
    let s = scale.max(1.0);
    Ok(returns.iter().zip(values).map(|(r, v)| (r - v) / s).collect())
}

fn weighted_mean(x: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let n = weights.len();
    if x.dims() != [n] {
        return Err(Error::contract(format!("weights for {n} rows, loss shaped {:?}", x.dims())));
    }
    let w = Tensor::from_slice(weights, n, x.device())?.to_dtype(x.dtype())?;
    Ok((x.mul(&w)?.sum_all()? / n as f64)?)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ActorStats {
    pub entropy: f64,
    pub mean_advantage: f64,
}

/// Entropy-regularized policy gradient with normalized advantages.
/// Minimizing the result increases `adv * log pi` and increases entropy.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    log_pi: &Tensor,
    entropy: &Tensor,
    returns: &[f64],
    values: &[f64],
    weights: &[f64],
    scale: f64,
    entropy_coeff: f64,
) -> Result<(Tensor, ActorStats)> {
    let adv = normalized_advantages(returns, values, scale)?;
    let adv_t = Tensor::from_slice(&adv, adv.len(), log_pi.device())?.to_dtype(log_pi.dtype())?;
    let pg = adv_t.mul(log_pi)?;
    let per = (pg.neg()? - (entropy * entropy_coeff)?)?;
    let loss = weighted_mean(&per, weights)?;
    let stats = ActorStats {
        entropy: nn::scalar(&entropy.mean_all()?)?,
        mean_advantage: adv.iter().sum::<f64>() / adv.len().max(1) as f64,
    };
    Ok((loss, stats))
}

/// Twohot NLL of `returns` under the critic, plus a pull toward the slow
/// critic's mean scaled by `reg_scale`.
pub fn critic_loss(
    critic: &Critic,
    features: &Tensor,
    returns: &[f64],
    slow_values: &[f64],
    weights: &[f64],
    reg_scale: f64,
) -> Result<Tensor> {
    let logits = critic.logits(&features.detach())?;
    let (dt, dev) = (logits.dtype(), logits.device().clone());
    let nll = twohot_nll(&logits, &twohot_targets(critic.codec(), returns, dt, &dev)?)?;
    let mut loss = weighted_mean(&nll, weights)?;
    if reg_scale > 0.0 {
        let reg = twohot_nll(&logits, &twohot_targets(critic.codec(), slow_values, dt, &dev)?)?;
        loss = (loss + (weighted_mean(&reg, weights)? * reg_scale)?)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct HeadLosses {
    pub reward: f64,
    pub cont: f64,
}

/// Reward twohot NLL plus continuation Bernoulli NLL, averaged over rows.
pub fn heads_loss(heads: &Heads, features: &Tensor, rewards: &[f64], continues: &[f64]) -> Result<(Tensor, HeadLosses)> {
    let logits = heads.reward_logits(features)?;
    let targets = twohot_targets(heads.codec(), rewards, logits.dtype(), logits.device())?;
    let reward = twohot_nll(&logits, &targets)?.mean_all()?;
    let c = Tensor::from_slice(continues, continues.len(), features.device())?.to_dtype(features.dtype())?;
    let cont = bernoulli_nll(&heads.cont_logits(features)?, &c)?.mean_all()?;
    let parts = HeadLosses {
        reward: nn::scalar(&reward)?,
        cont: nn::scalar(&cont)?,
    };
    Ok(((reward + cont)?, parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldModelScales {
    pub rec: f64,
    pub dyn_kl: f64,
    pub rep_kl: f64,
    pub free_bits: f64,
}

impl Default for WorldModelScales {
    fn default() -> Self {
        Self {
            rec: 1.0,
            dyn_kl: 1.0,
            rep_kl: 0.1,
            free_bits: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct LayerLossStats {
    pub rec: f64,
    pub dyn_kl: f64,
    pub rep_kl: f64,
}

/// `max(free_bits, kl)`: below the floor the term is constant.
pub fn free_bits(kl: &Tensor, floor: f64) -> Result<Tensor> {
    Ok(kl.maximum(floor)?)
}

/// Sums scaled reconstruction and clipped KL terms over layers, averaged
/// over batch and time. `per_step[t][k]` holds layer `k` at step `t`.
pub fn world_model_loss(per_step: &[Vec<LayerLosses>], scales: &WorldModelScales) -> Result<(Tensor, Vec<LayerLossStats>)> {
    let steps = per_step.len();
    if steps == 0 {
        return Err(Error::contract("world model loss over zero steps"));
    }
    let layers = per_step[0].len();
    let mut total: Option<Tensor> = None;
    let mut stats = Vec::with_capacity(layers);
    for k in 0..layers {
        let stack = |f: fn(&LayerLosses) -> &Tensor| -> Result<Tensor> {
            let v: Vec<&Tensor> = per_step.iter().map(|s| f(&s[k])).collect();
            Ok(Tensor::stack(&v, 0)?)
        };
        let rec = stack(|l| &l.rec)?.mean_all()?;
        let dyn_kl = stack(|l| &l.dyn_kl)?;
        let rep_kl = stack(|l| &l.rep_kl)?;
        let dyn_loss = free_bits(&dyn_kl, scales.free_bits)?.mean_all()?;
        let rep_loss = free_bits(&rep_kl, scales.free_bits)?.mean_all()?;
        let layer = ((rec.clone() * scales.rec)? + (dyn_loss * scales.dyn_kl)? + (rep_loss * scales.rep_kl)?)?;
        stats.push(LayerLossStats {
            rec: nn::scalar(&rec)?,
            dyn_kl: nn::scalar(&dyn_kl.mean_all()?)?,
            rep_kl: nn::scalar(&rep_kl.mean_all()?)?,
        });
        total = Some(match total {
            None => layer,
            Some(t) => (t + layer)?,
        });
    }
    Ok((total.expect("at least one layer"), stats))
}

/// Entropy of an actor distribution per row.
pub fn policy_entropy(dist: &Categorical) -> Result<Tensor> {
    categorical_entropy(&dist.probs, &dist.log_probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;

    /// Independent recursion: each return written out as the explicit
    /// weighted sum of n-step returns.
    fn oracle_returns(r: &[f64], c: &[f64], v: &[f64], g: f64, l: f64) -> Vec<f64> {
        let t = r.len();
        let mut out = Vec::with_capacity(t + 1);
        for s in 0..t {
            // n-step return G^n_s for n = 1..=t-s; the last one bootstraps fully.
            let nstep = |n: usize| -> f64 {
                let mut acc = 0.0;
                let mut disc = 1.0;
                for j in 0..n {
                    acc += disc * r[s + j];
                    disc *= g * c[s + j];
                }
                acc + disc * v[s + n]
            };
            let h = t - s;
            let mut total = 0.0;
            for n in 1..h {
                total += (1.0 - l) * l.powi(n as i32 - 1) * nstep(n);
            }
            total += l.powi(h as i32 - 1) * nstep(h);
            out.push(total);
        }
        out.push(v[t]);
        out
    }

    #[test]
    fn lambda_return_examples() {
        let r = lambda_returns(&[1.0], &[1.0], &[2.0, 3.0], 0.9, 0.95).unwrap();
        assert!((r[1] - 3.0).abs() < 1e-12);
        assert!((r[0] - 3.7).abs() < 1e-12);
        let r = lambda_returns(&[1.0, 2.0, 3.0], &[0.0; 3], &[5.0; 4], 0.9, 0.95).unwrap();
        assert_eq!(&r[..3], &[1.0, 2.0, 3.0]);
        assert!(lambda_returns(&[1.0], &[1.0], &[1.0], 0.9, 0.9).is_err());
    }

    proptest! {
        #[test]
        fn lambda_returns_match_oracle(
            t in 1usize..=10,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c: Vec<f64> = (0..t).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
            let v: Vec<f64> = (0..=t).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = lambda_returns(&r, &c, &v, 0.97, 0.9).unwrap();
            let b = oracle_returns(&r, &c, &v, 0.97, 0.9);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn advantages_translation_invariant(shift in -50.0f64..50.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = normalized_advantages(&r, &v, 4.0).unwrap();
            let rs: Vec<f64> = r.iter().map(|x| x + shift).collect();
            let vs: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let b = normalized_advantages(&rs, &vs, 4.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    fn cfg() -> BehaviorConfig {
        BehaviorConfig {
            hidden_size: 8,
            mlp_layers: 1,
            bins: 41,
            ..BehaviorConfig::default()
        }
    }

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn store() -> ParamStore {
        ParamStore::new(DType::F64, Device::Cpu)
    }

    #[test]
    fn actor_head_ranges() {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actor = Actor::new(&mut Init::new(&mut s, &mut rng), 6, 4, &cfg()).unwrap();
        let heads = Heads::new(&mut Init::new(&mut s, &mut rng), 6, &cfg()).unwrap();
        let f = randn(&[5, 6], &mut rng);
        for row in actor.dist(&f).unwrap().probs.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|p| *p >= 0.01 / 4.0 - 1e-15));
        }
        for p in heads.cont_prob(&f).unwrap().to_vec1::<f64>().unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
        for r in heads.reward_mean(&f).unwrap().to_vec1::<f64>().unwrap() {
            assert!(r.is_finite());
        }
    }

    #[test]
    fn continue_nll_is_minus_log_p() {
        let x = Tensor::new(&[0.3f64], &Device::Cpu).unwrap();
        let one = Tensor::new(&[1.0f64], &Device::Cpu).unwrap();
        let nll = bernoulli_nll(&x, &one).unwrap().to_vec1::<f64>().unwrap()[0];
        let p = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((nll + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn reward_zero_targets_center_bin() {
        let codec = cfg().codec().unwrap();
        let t = codec.encode(0.0).unwrap();
        assert_eq!(t[20], 1.0);
        assert_eq!(t.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn critic_nll_at_exact_bin() {
        // Huge logit on the target bin: the unimixed probability is
        // 0.99 + 0.01/bins and the loss is its negative log.
        let codec = TwohotCodec::symexp_spaced(3, -1.0, 1.0).unwrap();
        let logits = Tensor::new(&[[-1e4f64, 1e4, -1e4]], &Device::Cpu).unwrap();
        let target = twohot_targets(&codec, &[0.0], DType::F64, &Device::Cpu).unwrap();
        let nll = twohot_nll(&logits, &target).unwrap().to_vec1::<f64>().unwrap()[0];
        let expect = -(0.99f64 + 0.01 / 3.0).ln();
        assert!((nll - expect).abs() < 1e-12, "{nll} vs {expect}");
        assert!(nll >= 0.0);
    }

    #[test]
    fn twohot_nll_gradient_matches_finite_differences() {
        let codec = TwohotCodec::new(vec![-1.0, 0.0, 1.0], crate::numerics::BinTransform::Identity).unwrap();
        let base = [0.2f64, -0.4, 0.7];
        let target = twohot_targets(&codec, &[0.35], DType::F64, &Device::Cpu).unwrap();
        let f = |l: &[f64]| -> f64 {
            let t = Tensor::new(&[[l[0], l[1], l[2]]], &Device::Cpu).unwrap();
            nn::scalar(&twohot_nll(&t, &target).unwrap().sum_all().unwrap()).unwrap()
        };
        let var = Var::new(&[base], &Device::Cpu).unwrap();
        let loss = twohot_nll(var.as_tensor(), &target).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let grad = g.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..3 {
            let mut hi = base;
            let mut lo = base;
            hi[i] += 1e-5;
            lo[i] -= 1e-5;
            let fd = (f(&hi) - f(&lo)) / 2e-5;
            assert!((fd - grad[i]).abs() < 1e-6, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_advantage_leaves_entropy_term() {
        let logp = Tensor::new(&[-1.0f64, -2.0], &Device::Cpu).unwrap();
        let ent = Tensor::new(&[0.5f64, 0.7], &Device::Cpu).unwrap();
        let (loss, _) = actor_loss(&logp, &ent, &[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0], 1.0, 3e-4).unwrap();
        assert!((nn::scalar(&loss).unwrap() + 3e-4 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn scaled_advantages_are_scale_invariant() {
        let r = [0.0, 3.0, -2.0];
        let v = [1.0, 0.5, 0.0];
        let a = normalized_advantages(&r, &v, 5.0).unwrap();
        let r2: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let b = normalized_advantages(&r2, &v2, 10.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_coefficient_controls_entropy_gradient() {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actor = Actor::new(&mut Init::new(&mut s, &mut rng), 4, 4, &cfg()).unwrap();
        // Away from the uniform policy, where the entropy gradient vanishes.
        for v in s.vars() {
            v.set(&randn(v.dims(), &mut rng)).unwrap();
        }
        let f = randn(&[3, 4], &mut rng);
        let grad_norm = |eta: f64| {
            let dist = actor.dist(&f).unwrap();
            let ent = policy_entropy(&dist).unwrap();
            let logp = dist.log_probs.narrow(1, 0, 1).unwrap().squeeze(1).unwrap();
            let (loss, _) = actor_loss(&logp, &ent, &[0.0; 3], &[0.0; 3], &[1.0; 3], 1.0, eta).unwrap();
            let g = loss.backward().unwrap();
            s.vars()
                .filter_map(|v| g.get(v.as_tensor()))
                .map(|t| nn::scalar(&t.sqr().unwrap().sum_all().unwrap()).unwrap())
                .sum::<f64>()
        };
        assert_eq!(grad_norm(0.0), 0.0);
        assert!(grad_norm(3e-4) > 0.0);
    }

    #[test]
    fn entropy_is_maximal_for_uniform() {
        let uni = Tensor::new(&[[0.25f64; 4]], &Device::Cpu).unwrap();
        let skew = Tensor::new(&[[0.7f64, 0.1, 0.1, 0.1]], &Device::Cpu).unwrap();
        let h = |p: &Tensor| {
            let d = Categorical { probs: p.clone(), log_probs: p.log().unwrap() };
            nn::scalar(&policy_entropy(&d).unwrap().sum_all().unwrap()).unwrap()
        };
        assert!((h(&uni) - 4f64.ln()).abs() < 1e-12);
        assert!(h(&skew) < h(&uni));
    }

    #[test]
    fn slow_update_rules() {
        let mut fast = store();
        let mut slow = store();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        Critic::new(&mut Init::new(&mut fast, &mut r1), 3, &cfg()).unwrap();
        Critic::new(&mut Init::new(&mut slow, &mut r2), 3, &cfg()).unwrap();
        let vals = |s: &ParamStore| -> Vec<f64> {
            s.vars().flat_map(|v| v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()).collect()
        };
        let f0 = vals(&fast);
        let s0 = vals(&slow);
        slow_critic_update(&fast, &slow, 0.0).unwrap();
        assert_eq!(vals(&slow), s0);

        let rate: f64 = 0.02;
        slow_critic_update(&fast, &slow, rate).unwrap();
        slow_critic_update(&fast, &slow, rate).unwrap();
        let once = 1.0 - (1.0 - rate).powi(2);
        for ((s, s_init), f) in vals(&slow).iter().zip(&s0).zip(&f0) {
            let expect = (1.0 - once) * s_init + once * f;
            assert!((s - expect).abs() < 1e-12);
        }
        slow_critic_update(&fast, &slow, 1.0).unwrap();
        assert_eq!(vals(&slow), f0);
    }

    #[test]
    fn free_bits_floor_has_zero_gradient() {
        let kl = Var::new(&[0.3f64, 0.9, 1.5], &Device::Cpu).unwrap();
        let loss = free_bits(kl.as_tensor(), 1.0).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let grad = g.get(kl.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(grad, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn critic_loss_ignores_actor_and_upstream() {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let critic = Critic::new(&mut Init::new(&mut s, &mut rng), 4, &cfg()).unwrap();
        let upstream = Var::new(&[[0.1f64, 0.2, 0.3, 0.4]], &Device::Cpu).unwrap();
        let feats = (upstream.as_tensor() * 2.0).unwrap();
        let loss = critic_loss(&critic, &feats, &[1.0], &[0.5], &[1.0], 1.0).unwrap();
        let g = loss.backward().unwrap();
        assert!(g.get(upstream.as_tensor()).is_none());
        assert!(s.vars().any(|v| g.get(v.as_tensor()).is_some()));
    }
}
