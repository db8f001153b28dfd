//! Shared fixtures: random parameters and a naive reference transformer.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Normal};

use tensorar::linalg::Real;
use tensorar::model::{self, ModelConfig, ModelParams};
use tensorar::seed;
use tensorar::tensorize::{self, Window};
use tensorar::toydata::{Sample, TokenId};

pub fn config(k: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        k,
        seq_len: 12,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_q: 1,
        num_classes: 3,
        seed: 21,
    }
}

/// Every parameter drawn from N(0, 0.3²) with gates optionally zeroed, so
/// biases and norm gains are exercised too.
pub fn random_params(cfg: ModelConfig, zero_gates: bool, seed_value: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(cfg).unwrap();
    let mut rng = seed::rng(seed_value);
    let dist = Normal::new(0.0, 0.3).unwrap();
    for x in p.data.iter_mut() {
        *x = dist.sample(&mut rng);
    }
    if zero_gates {
        p.tensor_mut("q_in.gate.w").unwrap().fill(0.0);
        p.tensor_mut("q_out.gate.w").unwrap().fill(0.0);
    }
    p
}

pub fn random_tokens(n: usize, v: usize, seed_value: u64) -> Vec<TokenId> {
    let mut rng = seed::rng(seed_value);
    (0..n).map(|_| rng.random_range(0..v as TokenId)).collect()
}

// ----- naive reference: plain next-token transformer -----

fn t<'a>(p: &'a ModelParams<f64>, name: &str) -> &'a [f64] {
    p.tensor(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, d_out: usize) -> Vec<f64> {
    (0..d_out)
        .map(|o| {
            let mut s = b.map_or(0.0, |b| b[o]);
            for (i, xi) in x.iter().enumerate() {
                s += xi * w[i * d_out + o];
            }
            s
        })
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * r * g + b).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Logits `T × V` of a vanilla causal transformer that reads the class at
/// position 0 and token `s − 1` at position `s`.
pub fn reference_ar(p: &ModelParams<f64>, class: usize, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let c = p.config;
    let (d, l, h) = (c.d_model, c.seq_len, c.n_heads);
    let dh = d / h;
    let emb = t(p, "token_embedding");
    let pos = t(p, "position_embedding");
    let cls = t(p, "class_embedding");
    let mut xs: Vec<Vec<f64>> = (0..l)
        .map(|s| {
            let src = if s == 0 {
                &cls[class * d..(class + 1) * d]
            } else {
                let tok = tokens[s - 1] as usize;
                &emb[tok * d..(tok + 1) * d]
            };
            src.iter().zip(&pos[s * d..(s + 1) * d]).map(|(a, b)| a + b).collect()
        })
        .collect();
    for layer in 0..c.n_layers {
        let n = |s: &str| format!("blocks.{layer}.{s}");
        let a: Vec<Vec<f64>> = xs.iter().map(|x| layer_norm(x, t(p, &n("ln1.g")), t(p, &n("ln1.b")))).collect();
        let qkv: Vec<Vec<f64>> = a
            .iter()
            .map(|x| affine(x, t(p, &n("attn.qkv.w")), Some(t(p, &n("attn.qkv.b"))), 3 * d))
            .collect();
        for i in 0..l {
            let mut ctx = vec![0.0; d];
            for head in 0..h {
                let o = head * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|e| qkv[i][o + e] * qkv[j][d + o + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - m).exp() / z;
                    for e in 0..dh {
                        ctx[o + e] += w * qkv[j][2 * d + o + e];
                    }
                }
            }
            let proj = affine(&ctx, t(p, &n("attn.proj.w")), Some(t(p, &n("attn.proj.b"))), d);
            xs[i].iter_mut().zip(&proj).for_each(|(x, y)| *x += y);
        }
        for x in xs.iter_mut() {
            let a = layer_norm(x, t(p, &n("ln2.g")), t(p, &n("ln2.b")));
            let h1: Vec<f64> = affine(&a, t(p, &n("mlp.fc1.w")), Some(t(p, &n("mlp.fc1.b"))), 4 * d)
                .into_iter()
                .map(gelu)
                .collect();
            let y = affine(&h1, t(p, &n("mlp.fc2.w")), Some(t(p, &n("mlp.fc2.b"))), d);
            x.iter_mut().zip(&y).for_each(|(x, y)| *x += y);
        }
    }
    xs.iter()
        .map(|x| {
            let hn = layer_norm(x, t(p, "ln_f.g"), t(p, "ln_f.b"));
            affine(&hn, t(p, "head.w"), Some(t(p, "head.b")), c.vocab_size)
        })
        .collect()
}

pub fn windows_of(tokens: &[TokenId], k: usize, v: usize) -> Vec<Window> {
    tensorize::to_windows(tokens, k, v).unwrap().input_windows()
}

/// Mean next-token cross-entropy of [`reference_ar`] over `samples`.
pub fn reference_ar_loss(p: &ModelParams<f64>, samples: &[Sample]) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let logits = reference_ar(p, s.class_label, &s.tokens);
        for (row, tok) in s.tokens.iter().enumerate() {
            let m = logits[row].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits[row].iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - logits[row][*tok as usize];
        }
    }
    total / (samples.len() * p.config.seq_len) as f64
}

/// Largest difference between cached step-by-step logits and the full
/// forward pass over one random sequence. Also checks that the state
/// refuses a step past its capacity.
pub fn incremental_max_diff<F: Real>(p: &ModelParams<F>, seed_value: u64) -> f64 {
    let cfg = p.config;
    let (k, v) = (cfg.k, cfg.vocab_size);
    let tokens = random_tokens(cfg.seq_len, v, seed_value);
    let windows = windows_of(&tokens, k, v);
    let class = (seed_value as usize) % cfg.num_classes;
    let full = model::forward(p, class, &windows).unwrap();
    let mut state = model::DecodeState::new(p, class).unwrap();
    let mut worst = 0.0f64;
    let mut compare = |row: usize, got: &[F]| {
        for j in 0..k {
            for (a, b) in got[j * v..(j + 1) * v].iter().zip(full.slot(&cfg, row, j)) {
                worst = worst.max((a.to_f64() - b.to_f64()).abs());
            }
        }
    };
    compare(0, &model::forward_class_step(p, &mut state).unwrap());
    for row in 1..cfg.seq_len {
        compare(row, &model::forward_step(p, &mut state, &windows[row - 1].tokens).unwrap());
    }
    assert!(model::forward_step(p, &mut state, &windows[0].tokens).is_err());
    worst
}
