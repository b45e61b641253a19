use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resdreamer::nn::{self, Init, ParamStore};
use resdreamer::numerics::categorical_kl_tensor;
use resdreamer::ppb::{Ppb, PpbConfig};

fn cfg() -> PpbConfig {
    PpbConfig {
        h_size: 6,
        latent_groups: 2,
        latent_classes: 3,
        cnn_base_channels: 2,
        decoder_base_channels: 2,
        hidden_size: 5,
        input_channels: 6,
        image_size: 8,
        num_actions: 2,
        decode_raw: true,
        decode_residual: true,
    }
}

/// Block with every parameter, gains and offsets included, drawn at random.
fn block(seed: u64) -> (Ppb, ParamStore) {
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ppb = Ppb::new(&mut Init::new(&mut store, &mut rng), cfg()).unwrap();
    for v in store.vars() {
        let n = v.elem_count();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        v.set(&Tensor::from_vec(data, v.shape(), &Device::Cpu).unwrap()).unwrap();
    }
    (ppb, store)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap_or_else(|| panic!("no parameter {name}")).as_tensor().flatten_all().unwrap().to_vec1().unwrap()
}

// Plain-loop reference for the gated recurrent update.
fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>()).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + 1e-3).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) / sd * g[i] + b[i]).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn reference_step(store: &ParamStore, h: &[f64], z: &[f64], a: &[f64]) -> Vec<f64> {
    let p = |n: &str| values(store, n);
    let mut x: Vec<f64> = z.iter().chain(a).copied().collect();
    x = dense(&x, &p("seq.in.w"), &p("seq.in.b"));
    x = layer_norm(&x, &p("seq.in_norm.g"), &p("seq.in_norm.b"));
    x = x.iter().map(|v| v * sig(*v)).collect();
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let g = layer_norm(&dense(&xh, &p("seq.gru.w"), &p("seq.gru.b")), &p("seq.gru_norm.g"), &p("seq.gru_norm.b"));
    let n = h.len();
    (0..n)
        .map(|i| {
            let r = sig(g[i]);
            let c = (r * g[n + i]).tanh();
            let u = sig(g[2 * n + i] - 1.0);
            u * c + (1.0 - u) * h[i]
        })
        .collect()
}

#[test]
fn sequence_step_matches_reference() {
    let (b, store) = block(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = uniform(&[3, 6], &mut rng);
    let z = uniform(&[3, 2, 3], &mut rng);
    let a = nn::one_hot(&[0, 1, 1], 2, DType::F64, &Device::Cpu).unwrap();
    let got = b.sequence_step(&h, &z, &a).unwrap().to_vec2::<f64>().unwrap();
    let hv = h.to_vec2::<f64>().unwrap();
    let zv = z.flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
    let av = a.to_vec2::<f64>().unwrap();
    let mut total = 0.0;
    for r in 0..3 {
        let want = reference_step(&store, &hv[r], &zv[r], &av[r]);
        for (g, w) in got[r].iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        total += want.iter().sum::<f64>();
    }
    // Frozen from the reference above.
    assert!((total - GOLDEN_SUM).abs() < 1e-9, "sum {total:.12}");
}

const GOLDEN_SUM: f64 = 1.161034009236;

/// Smooth scalar through every sub-network: the sampled latent is replaced
/// by the posterior probabilities so the loss is differentiable.
fn objective(b: &Ppb, h: &Tensor, z: &Tensor, a: &Tensor, obs: &Tensor) -> Tensor {
    let h1 = b.sequence_step(h, z, a).unwrap();
    let post = b.encode(&h1, obs).unwrap();
    let prior = b.predict(&h1).unwrap();
    let rec = b.decode(&h1, &post.probs).unwrap();
    let kl = categorical_kl_tensor(&post.log_probs, &prior.log_probs).unwrap().sum_all().unwrap();
    let raw = rec.raw.unwrap().sqr().unwrap().sum_all().unwrap();
    let res = (rec.residual.unwrap() * 0.5).unwrap().sin().unwrap().sum_all().unwrap();
    ((kl + raw).unwrap() + res).unwrap()
}

fn bump(v: &Var, idx: usize, delta: f64) {
    let mut data: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    data[idx] += delta;
    v.set(&Tensor::from_vec(data, v.shape(), &Device::Cpu).unwrap()).unwrap();
}

#[test]
fn gradients_match_finite_differences() {
    let (b, store) = block(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = uniform(&[2, 6], &mut rng);
    let z = uniform(&[2, 2, 3], &mut rng);
    let a = nn::one_hot(&[1, 0], 2, DType::F64, &Device::Cpu).unwrap();
    let obs = uniform(&[2, 6, 8, 8], &mut rng);
    let grads = objective(&b, &h, &z, &a, &obs).backward().unwrap();
    let eps = 1e-5;
    let mut checked = 0;
    for (name, v) in store.named() {
        let g: Vec<f64> = grads
            .get(v.as_tensor())
            .unwrap_or_else(|| panic!("{name} has no gradient"))
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        for idx in [0, v.elem_count() / 2, v.elem_count() - 1] {
            bump(v, idx, eps);
            let up = nn::scalar(&objective(&b, &h, &z, &a, &obs)).unwrap();
            bump(v, idx, -2.0 * eps);
            let down = nn::scalar(&objective(&b, &h, &z, &a, &obs)).unwrap();
            bump(v, idx, eps);
            let fd = (up - down) / (2.0 * eps);
            let tol = 1e-6 * (1.0 + fd.abs());
            assert!((fd - g[idx]).abs() < tol, "{name}[{idx}]: autodiff {} vs fd {fd}", g[idx]);
            checked += 1;
        }
    }
    assert!(checked > 60);
}
