use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resdreamer::envs::{clairvoyant_action, DodgeConfig, DodgeWorld, Environment};

fn episode(seed: u64, mut policy: impl FnMut(&DodgeWorld) -> usize) -> (usize, bool) {
    let mut env = DodgeWorld::new(DodgeConfig::default()).unwrap();
    env.reset(seed).unwrap();
    let mut len = 0;
    loop {
        let a = policy(&env);
        let s = env.step(a).unwrap();
        len += 1;
        if s.is_last {
            return (len, env.success());
        }
    }
}

#[test]
fn uniform_random_policy_dies_early() {
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let lengths: Vec<usize> = (0..100).map(|seed| episode(seed, |_| rng.random_range(0..3)).0).collect();
    let mean = lengths.iter().sum::<usize>() as f64 / 100.0;
    println!("random policy mean episode length {mean:.2}");
    assert!(mean < 80.0, "mean length {mean}");
}

#[test]
fn clairvoyant_policy_survives() {
    let wins = (0..100).filter(|seed| episode(*seed, clairvoyant_action).1).count();
    println!("clairvoyant survival {wins}/100");
    assert!(wins >= 95, "{wins}/100");
}
