//! Synthetic token grids with exactly computable conditionals.
//!
//! A grid of `H × W` tokens is generated in raster order. Each token depends
//! on its left neighbour through a horizontal transition matrix, on the token
//! above through a vertical one, or on a λ-mixture of both. Every class owns
//! its own pair of matrices, so the conditional distribution at any position
//! is known in closed form and serves as the ground truth for evaluation.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

pub type TokenId = u32;

/// Entries are floored at this value before row normalization.
pub const TRANSITION_FLOOR: f64 = 1e-3;
pub const DEFAULT_MIX_WEIGHT: f64 = 0.5;

/// Transition matrices for one class, each `V × V` row-major and row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTransitions {
    pub horizontal: Vec<f64>,
    pub vertical: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub height: usize,
    pub width: usize,
    pub mix_weight: f64,
    pub init_dist: Vec<f64>,
    pub class_seeds: Vec<u64>,
    pub classes: Vec<ClassTransitions>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub class_label: usize,
    pub tokens: Vec<TokenId>,
}

fn random_stochastic_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        // Cubed exponential draws give peaked rows, i.e. a low-entropy chain.
        let row: Vec<f64> = (0..cols)
            .map(|_| {
                let u: f64 = rng.random::<f64>();
                let e = -(1.0 - u).ln();
                (e * e * e).max(TRANSITION_FLOOR)
            })
            .collect();
        let s: f64 = row.iter().sum();
        m.extend(row.iter().map(|v| v / s));
    }
    m
}

/// Builds a deterministic spec with per-class transition matrices.
pub fn make_spec(
    vocab_size: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
) -> Result<SyntheticSpec> {
    if vocab_size < 2 {
        return Err(Error::param(format!("vocab_size must be >= 2, got {vocab_size}")));
    }
    if height == 0 || width == 0 || height * width < 4 {
        return Err(Error::param(format!(
            "grid {height}x{width} must hold at least 4 tokens"
        )));
    }
    if num_classes == 0 {
        return Err(Error::param("num_classes must be >= 1"));
    }
    let mut init_rng = seed::derived_rng(seed, Stream::Spec, u64::MAX);
    let init_dist = random_stochastic_rows(&mut init_rng, 1, vocab_size);
    let class_seeds: Vec<u64> = (0..num_classes as u64)
        .map(|c| seed::derive(seed, Stream::Spec, c))
        .collect();
    let classes = class_seeds
        .iter()
        .map(|&s| {
            let mut rng = seed::rng(s);
            ClassTransitions {
                horizontal: random_stochastic_rows(&mut rng, vocab_size, vocab_size),
                vertical: random_stochastic_rows(&mut rng, vocab_size, vocab_size),
            }
        })
        .collect();
    Ok(SyntheticSpec {
        vocab_size,
        height,
        width,
        mix_weight: DEFAULT_MIX_WEIGHT,
        init_dist,
        class_seeds,
        classes,
        seed,
    })
}

impl SyntheticSpec {
    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn with_mix_weight(mut self, mix_weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mix_weight) {
            return Err(Error::param(format!("mix_weight {mix_weight} outside [0, 1]")));
        }
        self.mix_weight = mix_weight;
        Ok(self)
    }

    fn check_class(&self, class_label: usize) -> Result<&ClassTransitions> {
        self.classes.get(class_label).ok_or_else(|| {
            Error::param(format!(
                "class {class_label} out of range (num_classes = {})",
                self.classes.len()
            ))
        })
    }

    /// Writes the conditional distribution at `prefix.len()` into `out`.
    fn conditional_into(&self, class: &ClassTransitions, prefix: &[TokenId], out: &mut [f64]) {
        let v = self.vocab_size;
        let i = prefix.len();
        let (row, col) = (i / self.width, i % self.width);
        if i == 0 {
            out.copy_from_slice(&self.init_dist);
        } else if row == 0 {
            let left = prefix[i - 1] as usize;
            out.copy_from_slice(&class.horizontal[left * v..(left + 1) * v]);
        } else if col == 0 {
            let up = prefix[i - self.width] as usize;
            out.copy_from_slice(&class.vertical[up * v..(up + 1) * v]);
        } else {
            let left = prefix[i - 1] as usize;
            let up = prefix[i - self.width] as usize;
            let h = &class.horizontal[left * v..(left + 1) * v];
            let u = &class.vertical[up * v..(up + 1) * v];
            let lam = self.mix_weight;
            for s in 0..v {
                out[s] = lam * h[s] + (1.0 - lam) * u[s];
            }
        }
    }
}

/// Exact conditional `p(x_position | prefix, class)`.
pub fn oracle_conditional(
    spec: &SyntheticSpec,
    class_label: usize,
    prefix: &[TokenId],
    position: usize,
) -> Result<Vec<f64>> {
    let class = spec.check_class(class_label)?;
    if position != prefix.len() {
        return Err(Error::param(format!(
            "position {position} must equal prefix length {}",
            prefix.len()
        )));
    }
    if position >= spec.seq_len() {
        return Err(Error::param(format!(
            "position {position} beyond sequence length {}",
            spec.seq_len()
        )));
    }
    if let Some(&t) = prefix.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::param(format!("prefix token {t} outside vocabulary")));
    }
    let mut out = vec![0.0; spec.vocab_size];
    spec.conditional_into(class, prefix, &mut out);
    Ok(out)
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> TokenId {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (s, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return s as TokenId;
        }
    }
    // Rounding left a sliver of mass past the last cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId
}

/// Ancestral raster-order sample.
pub fn sample_grid(spec: &SyntheticSpec, class_label: usize, seed: u64) -> Result<Sample> {
    let class = spec.check_class(class_label)?;
    let mut rng = seed::rng(seed);
    let t = spec.seq_len();
    let mut tokens = Vec::with_capacity(t);
    let mut probs = vec![0.0; spec.vocab_size];
    for _ in 0..t {
        spec.conditional_into(class, &tokens, &mut probs);
        tokens.push(draw(&probs, &mut rng));
    }
    Ok(Sample {
        class_label,
        tokens,
    })
}

/// Negative log-likelihood in nats. Returns `+inf` for impossible sequences.
pub fn exact_nll(spec: &SyntheticSpec, class_label: usize, tokens: &[TokenId]) -> Result<f64> {
    let class = spec.check_class(class_label)?;
    if tokens.len() != spec.seq_len() {
        return Err(Error::param(format!(
            "sequence length {} != {}",
            tokens.len(),
            spec.seq_len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::param(format!("token {t} outside vocabulary")));
    }
    let mut probs = vec![0.0; spec.vocab_size];
    let mut nll = 0.0;
    for i in 0..tokens.len() {
        spec.conditional_into(class, &tokens[..i], &mut probs);
        let p = probs[tokens[i] as usize];
        if p <= 0.0 {
            return Ok(f64::INFINITY);
        }
        nll -= p.ln();
    }
    Ok(nll)
}

/// Sum of conditional entropies along one oracle sample; its expectation is
/// the sequence entropy.
pub fn conditional_entropy_along(
    spec: &SyntheticSpec,
    class_label: usize,
    tokens: &[TokenId],
) -> Result<f64> {
    let class = spec.check_class(class_label)?;
    let mut probs = vec![0.0; spec.vocab_size];
    let mut h = 0.0;
    for i in 0..tokens.len() {
        spec.conditional_into(class, &tokens[..i], &mut probs);
        h -= probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
    }
    Ok(h)
}

/// Index ranges for the training and held-out splits. Held-out samples use
/// seeds derived from a disjoint index range.
pub const HELDOUT_INDEX_OFFSET: u64 = 1 << 40;

/// Generates `count` samples with class labels assigned round-robin.
pub fn generate_dataset(
    spec: &SyntheticSpec,
    count: usize,
    seed: u64,
    index_offset: u64,
) -> Result<Vec<Sample>> {
    let c = spec.num_classes();
    (0..count)
        .map(|i| {
            let idx = index_offset + i as u64;
            sample_grid(spec, i % c, seed::derive(seed, Stream::Sample, idx))
        })
        .collect()
}

/// Writes one `class<TAB>tokens` record per line.
pub fn write_dataset(samples: &[Sample], out: &mut impl Write) -> std::io::Result<()> {
    for s in samples {
        write!(out, "{}\t", s.class_label)?;
        for (i, t) in s.tokens.iter().enumerate() {
            if i > 0 {
                out.write_all(b" ")?;
            }
            write!(out, "{t}")?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |d: String| Error::format("dataset record", format!("line {}: {d}", lineno + 1));
        let (label, toks) = line
            .split_once('\t')
            .ok_or_else(|| bad("missing tab separator".into()))?;
        let class_label = label
            .parse()
            .map_err(|e| bad(format!("class label {label:?}: {e}")))?;
        let tokens = toks
            .split(' ')
            .map(|t| t.parse().map_err(|e| bad(format!("token {t:?}: {e}"))))
            .collect::<Result<Vec<TokenId>>>()?;
        samples.push(Sample {
            class_label,
            tokens,
        });
    }
    Ok(samples)
}

/// Histogram of horizontally adjacent pairs `(x[r][c], x[r][c+1])`,
/// normalized to a distribution over `V²` cells.
pub fn horizontal_bigram_histogram(
    samples: impl IntoIterator<Item = impl AsRef<[TokenId]>>,
    vocab_size: usize,
    width: usize,
) -> Vec<f64> {
    let mut counts = vec![0u64; vocab_size * vocab_size];
    let mut total = 0u64;
    for s in samples {
        for row in s.as_ref().chunks(width) {
            for pair in row.windows(2) {
                counts[pair[0] as usize * vocab_size + pair[1] as usize] += 1;
                total += 1;
            }
        }
    }
    let total = total.max(1) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
