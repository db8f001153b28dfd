//! Commit-and-refine sampling.
//!
//! Step 0 feeds the class position and samples a full window for positions
//! `0..k`. Every later step `t` feeds `[committed x_{t-1}] ++ provisional`
//! and samples a new window for positions `t..t+k`; slot 0 is committed as
//! `x_t` and slots `1..k` become the next step's provisional tokens. A
//! position therefore receives one prediction from every window covering
//! it, and the committed value is its last, most refined prediction.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use crate::model::DecodeState;

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::{self, ModelConfig, ModelParams};
use crate::seed::{self, Stream};
use crate::tensorize::{self, padding};
use crate::toydata::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProvisionalPolicy {
    Sample,
    Argmax,
}

impl fmt::Display for ProvisionalPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProvisionalPolicy::Sample => "sample",
            ProvisionalPolicy::Argmax => "argmax",
        })
    }
}

impl FromStr for ProvisionalPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(ProvisionalPolicy::Sample),
            "argmax" => Ok(ProvisionalPolicy::Argmax),
            other => Err(Error::param(format!(
                "unknown provisional policy {other:?} (expected sample or argmax)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub temperature: f64,
    /// Keep only the `top_k` most likely symbols; `V` disables truncation.
    pub top_k: usize,
    pub greedy: bool,
    pub provisional_policy: ProvisionalPolicy,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        DecodeConfig {
            temperature: 1.0,
            top_k: vocab_size,
            greedy: false,
            provisional_policy: ProvisionalPolicy::Sample,
            seed,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::param(format!("temperature {} must be positive", self.temperature)));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::param(format!(
                "top_k {} must lie in [1, {vocab_size}]",
                self.top_k
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DecodeConfig { seed, ..self.clone() }
    }
}

/// Index of the largest logit (first on ties).
pub fn argmax<F: Real>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled, top-k-truncated categorical draw from one slot's logits.
pub fn sample_logits<F: Real>(logits: &[F], temperature: f64, top_k: usize, rng: &mut impl Rng) -> TokenId {
    let v = logits.len();
    let mut scaled: Vec<f64> = logits.iter().map(|x| x.to_f64() / temperature).collect();
    if top_k < v {
        let mut sorted = scaled.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cutoff = sorted[top_k - 1];
        let mut kept = 0;
        for x in scaled.iter_mut() {
            // Ties at the cutoff keep the earliest indices only.
            if *x >= cutoff && kept < top_k {
                kept += 1;
            } else {
                *x = f64::NEG_INFINITY;
            }
        }
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in scaled.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let u: f64 = rng.random::<f64>() * sum;
    let mut acc = 0.0;
    for (i, &p) in scaled.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    scaled.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId
}

/// Per-step windows and per-position prediction histories of one decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeTrace {
    pub k: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Window sampled at each step; slots past the sequence end hold Δ.
    pub windows: Vec<Vec<TokenId>>,
    /// For each position, `(step, predicted token)` in step order.
    pub history: Vec<Vec<(usize, TokenId)>>,
}

impl DecodeTrace {
    /// Line format `position<TAB>step<TAB>predicted_token`, grouped by
    /// position with steps ascending.
    pub fn write_lines(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (pos, h) in self.history.iter().enumerate() {
            for &(step, tok) in h {
                writeln!(out, "{pos}\t{step}\t{tok}")?;
            }
        }
        Ok(())
    }
}

/// Number of predictions position `position` received before commitment.
pub fn refine_count(trace: &DecodeTrace, position: usize) -> Result<usize> {
    trace
        .history
        .get(position)
        .map(Vec::len)
        .ok_or_else(|| Error::param(format!("position {position} outside sequence of {}", trace.seq_len)))
}

fn pick<F: Real>(logits: &[F], cfg: &DecodeConfig, provisional: bool, rng: &mut ChaCha8Rng) -> TokenId {
    if cfg.greedy || (provisional && cfg.provisional_policy == ProvisionalPolicy::Argmax) {
        argmax(logits) as TokenId
    } else {
        sample_logits(logits, cfg.temperature, cfg.top_k, rng)
    }
}

/// Generates one sequence of `T` tokens for `class_label`.
pub fn generate<F: Real>(
    params: &ModelParams<F>,
    class_label: usize,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    let mc = &params.config;
    cfg.validate(mc.vocab_size)?;
    let (t_len, k, v) = (mc.seq_len, mc.k, mc.vocab_size);
    let pad = padding(v);
    let mut rng = seed::rng(cfg.seed);
    let mut state = DecodeState::new(params, class_label)?;
    let mut trace = DecodeTrace {
        k,
        seq_len: t_len,
        vocab_size: v,
        windows: Vec::with_capacity(t_len),
        history: vec![Vec::with_capacity(k); t_len],
    };
    let mut input = vec![pad; k];
    for step in 0..t_len {
        let logits = if step == 0 {
            model::forward_class_step(params, &mut state)?
        } else {
            input[0] = state.committed[step - 1];
            input[1..].copy_from_slice(&state.provisional);
            model::forward_step(params, &mut state, &input)?
        };
        let mut window = vec![pad; k];
        for (j, slot) in window.iter_mut().enumerate() {
            let pos = step + j;
            if pos >= t_len {
                break;
            }
            *slot = pick(&logits[j * v..(j + 1) * v], cfg, j > 0, &mut rng);
            trace.history[pos].push((step, *slot));
        }
        state.committed.push(window[0]);
        state.provisional.clear();
        state.provisional.extend_from_slice(&window[1..]);
        state.step_index += 1;
        trace.windows.push(window);
    }
    let tokens = tensorize::from_committed(&state.committed, t_len, v)?;
    Ok((tokens, trace))
}

/// Sample `i` of a numbered set uses this decode seed.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    seed::derive(base, Stream::Decode, index)
}

/// Writes the grid as `height` lines of `width` space-separated ids.
pub fn write_grid(tokens: &[TokenId], width: usize, out: &mut impl Write) -> std::io::Result<()> {
    for row in tokens.chunks(width) {
        let line: Vec<String> = row.iter().map(|t| t.to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Binary portable graymap, token id scaled linearly to `0..=255`.
pub fn write_pgm(
    tokens: &[TokenId],
    width: usize,
    vocab_size: usize,
    out: &mut impl Write,
) -> std::io::Result<()> {
    let height = tokens.len() / width;
    write!(out, "P5\n{width} {height}\n255\n")?;
    let denom = (vocab_size.max(2) - 1) as f64;
    let pixels: Vec<u8> = tokens
        .iter()
        .map(|&t| ((t as f64 / denom) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&pixels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub label: String,
    pub k: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub samples_per_sec: f64,
    pub samples_per_sec_std: f64,
    pub ms_per_step: f64,
    pub ms_per_step_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Times `batch` generations per repetition for each model, after one
/// untimed warm-up generation. Every model decodes the same seed set.
pub fn throughput_bench<F: Real>(
    models: &[(String, ModelParams<F>)],
    batch: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<ThroughputRow>> {
    if repetitions == 0 || batch == 0 {
        return Err(Error::param("batch and repetitions must be >= 1"));
    }
    models
        .iter()
        .map(|(label, params)| {
            let c: &ModelConfig = &params.config;
            let base = DecodeConfig::new(c.vocab_size, seed);
            generate(params, 0, &base)?;
            let mut rates = Vec::with_capacity(repetitions);
            let mut step_ms = Vec::with_capacity(repetitions);
            for rep in 0..repetitions {
                let start = Instant::now();
                for i in 0..batch {
                    let cfg = base.with_seed(sample_seed(seed, (rep * batch + i) as u64));
                    generate(params, i % c.num_classes, &cfg)?;
                }
                let secs = start.elapsed().as_secs_f64();
                rates.push(batch as f64 / secs);
                step_ms.push(secs * 1e3 / (batch * c.seq_len) as f64);
            }
            let (sps, sps_std) = mean_std(&rates);
            let (ms, ms_std) = mean_std(&step_ms);
            Ok(ThroughputRow {
                label: label.clone(),
                k: c.k,
                d_model: c.d_model,
                n_layers: c.n_layers,
                samples_per_sec: sps,
                samples_per_sec_std: sps_std,
                ms_per_step: ms,
                ms_per_step_std: ms_std,
            })
        })
        .collect()
}

/// Tab-separated bench table with a header line.
pub fn write_throughput_table(rows: &[ThroughputRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "label\tk\td_model\tn_layers\tsamples_per_sec\tsamples_per_sec_std\tms_per_step\tms_per_step_std"
    )?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{:.5}\t{:.5}",
            r.label, r.k, r.d_model, r.n_layers, r.samples_per_sec, r.samples_per_sec_std, r.ms_per_step, r.ms_per_step_std
        )?;
    }
    Ok(())
}
