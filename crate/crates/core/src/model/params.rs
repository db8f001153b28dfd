//! Flat parameter storage with a typed layout.
//!
//! All learnable arrays live in one contiguous vector. [`Layout`] records
//! where each array sits, under a stable dotted name, so the optimizer,
//! gradient checker, and checkpoint code can treat parameters uniformly
//! while the forward pass uses typed offsets.

use std::ops::Range;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub k: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Number of cross-attention layers in each of the input and output
    /// query modules.
    pub d_q: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Param(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.k == 0 || self.k > self.seq_len {
            return fail(format!("k = {} must lie in [1, seq_len = {}]", self.k, self.seq_len));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".into());
        }
        if self.d_q == 0 {
            return fail("d_q must be >= 1".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be >= 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the backbone feed-forward layer.
    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    /// Width of the query modules' output MLP.
    pub fn query_mlp_hidden(&self) -> usize {
        self.d_model
    }
}

/// A dense layer `y = x·W + b`; `W` is `d_in × d_out`, followed by `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub start: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn w(&self) -> Range<usize> {
        self.start..self.start + self.d_in * self.d_out
    }

    pub fn b(&self) -> Option<Range<usize>> {
        let s = self.start + self.d_in * self.d_out;
        self.bias.then(|| s..s + self.d_out)
    }

    pub fn all(&self) -> Range<usize> {
        self.start..self.start + self.d_in * self.d_out + if self.bias { self.d_out } else { 0 }
    }
}

/// Layer-norm gain followed by bias, each of width `d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Norm {
    pub start: usize,
    pub d: usize,
}

impl Norm {
    pub fn gain(&self) -> Range<usize> {
        self.start..self.start + self.d
    }

    pub fn bias(&self) -> Range<usize> {
        self.start + self.d..self.start + 2 * self.d
    }

    pub fn all(&self) -> Range<usize> {
        self.start..self.start + 2 * self.d
    }
}

#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct QInLayerLayout {
    pub ln: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Compresses a window into one vector: a learned query cross-attends to
/// the window's symbol embeddings (plus slot embeddings).
#[derive(Debug, Clone)]
pub struct QInLayout {
    pub query: Range<usize>,
    pub slot_pos: Range<usize>,
    pub layers: Vec<QInLayerLayout>,
    pub ln_mlp: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub gate: Linear,
}

/// Value and output projections of one output-side cross-attention layer.
/// The memory is a single hidden state, so attention weights are
/// identically 1 and query/key projections would have no effect.
#[derive(Debug, Clone)]
pub struct QOutLayerLayout {
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub struct QOutLayout {
    pub slot_queries: Range<usize>,
    pub layers: Vec<QOutLayerLayout>,
    pub ln_mlp: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub gate: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    pub init: Init,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub token_embedding: Range<usize>,
    pub class_embedding: Range<usize>,
    pub position_embedding: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub ln_f: Norm,
    pub q_in: QInLayout,
    pub q_out: QOutLayout,
    pub head: Linear,
    pub entries: Vec<Entry>,
    pub total: usize,
}

const INIT_STD: f64 = 0.02;

struct Builder {
    entries: Vec<Entry>,
    next: usize,
}

impl Builder {
    fn array(&mut self, name: String, shape: Vec<usize>, init: Init) -> Range<usize> {
        let len: usize = shape.iter().product();
        let range = self.next..self.next + len;
        self.next += len;
        self.entries.push(Entry {
            name,
            shape,
            range: range.clone(),
            init,
        });
        range
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool, init: Init) -> Linear {
        let start = self.next;
        self.array(format!("{name}.w"), vec![d_in, d_out], init);
        if bias {
            self.array(format!("{name}.b"), vec![d_out], Init::Zeros);
        }
        Linear {
            start,
            d_in,
            d_out,
            bias,
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let start = self.next;
        self.array(format!("{name}.g"), vec![d], Init::Ones);
        self.array(format!("{name}.b"), vec![d], Init::Zeros);
        Norm { start, d }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let normal = Init::Normal(INIT_STD);
        let residual = Init::Normal(INIT_STD / (2.0 * cfg.n_layers as f64).sqrt());
        let mut b = Builder {
            entries: Vec::new(),
            next: 0,
        };
        let token_embedding = b.array("token_embedding".into(), vec![v + 1, d], normal);
        let class_embedding = b.array("class_embedding".into(), vec![cfg.num_classes, d], normal);
        let position_embedding = b.array("position_embedding".into(), vec![cfg.seq_len, d], normal);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("blocks.{l}");
                BlockLayout {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    qkv: b.linear(&format!("{p}.attn.qkv"), d, 3 * d, true, normal),
                    proj: b.linear(&format!("{p}.attn.proj"), d, d, true, residual),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    fc1: b.linear(&format!("{p}.mlp.fc1"), d, cfg.mlp_hidden(), true, normal),
                    fc2: b.linear(&format!("{p}.mlp.fc2"), cfg.mlp_hidden(), d, true, residual),
                }
            })
            .collect();
        let ln_f = b.norm("ln_f", d);
        let qh = cfg.query_mlp_hidden();
        let q_in = QInLayout {
            query: b.array("q_in.query".into(), vec![d], normal),
            slot_pos: b.array("q_in.slot_pos".into(), vec![cfg.k, d], normal),
            layers: (0..cfg.d_q)
                .map(|l| {
                    let p = format!("q_in.layers.{l}");
                    QInLayerLayout {
                        ln: b.norm(&format!("{p}.ln"), d),
                        q: b.linear(&format!("{p}.q"), d, d, true, normal),
                        k: b.linear(&format!("{p}.k"), d, d, true, normal),
                        v: b.linear(&format!("{p}.v"), d, d, true, normal),
                        o: b.linear(&format!("{p}.o"), d, d, true, normal),
                    }
                })
                .collect(),
            ln_mlp: b.norm("q_in.ln_mlp", d),
            fc1: b.linear("q_in.mlp.fc1", d, qh, true, normal),
            fc2: b.linear("q_in.mlp.fc2", qh, d, true, normal),
            gate: b.linear("q_in.gate", d, d, false, Init::Zeros),
        };
        let q_out = QOutLayout {
            slot_queries: b.array("q_out.slot_queries".into(), vec![cfg.k, d], normal),
            layers: (0..cfg.d_q)
                .map(|l| {
                    let p = format!("q_out.layers.{l}");
                    QOutLayerLayout {
                        v: b.linear(&format!("{p}.v"), d, d, true, normal),
                        o: b.linear(&format!("{p}.o"), d, d, true, normal),
                    }
                })
                .collect(),
            ln_mlp: b.norm("q_out.ln_mlp", d),
            fc1: b.linear("q_out.mlp.fc1", d, qh, true, normal),
            fc2: b.linear("q_out.mlp.fc2", qh, d, true, normal),
            gate: b.linear("q_out.gate", d, d, false, Init::Zeros),
        };
        let head = b.linear("head", d, v, true, normal);
        Layout {
            token_embedding,
            class_embedding,
            position_embedding,
            blocks,
            ln_f,
            q_in,
            q_out,
            head,
            total: b.next,
            entries: b.entries,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Model parameters in precision `F` together with their layout.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub layout: Arc<Layout>,
    pub data: Vec<F>,
}

impl<F: Real> ModelParams<F> {
    /// Deterministic initialization. Both query-module gates start at zero,
    /// so the fresh model is exactly a plain next-token transformer over
    /// each window's first symbol.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        let mut data = vec![F::ZERO; layout.total];
        for (i, e) in layout.entries.iter().enumerate() {
            let out = &mut data[e.range.clone()];
            match e.init {
                Init::Zeros => {}
                Init::Ones => out.fill(F::ONE),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    let mut rng = seed::derived_rng(config.seed, Stream::Init, i as u64);
                    for x in out.iter_mut() {
                        *x = F::from_f64(dist.sample(&mut rng));
                    }
                }
            }
        }
        Ok(ModelParams {
            config,
            layout,
            data,
        })
    }

    /// Rebuilds parameters from a flat vector (e.g. a loaded checkpoint).
    pub fn from_data(config: ModelConfig, data: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        if data.len() != layout.total {
            return Err(Error::param(format!(
                "parameter count {} does not match layout total {}",
                data.len(),
                layout.total
            )));
        }
        Ok(ModelParams {
            config,
            layout,
            data,
        })
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn get(&self, r: Range<usize>) -> &[F] {
        &self.data[r]
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout.entry(name).map(|e| &self.data[e.range.clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let r = self.layout.entry(name)?.range.clone();
        Some(&mut self.data[r])
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config,
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|x| G::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Overwrites both query-module gates with small random values. Used by
    /// tests and the gradient checker to exercise the correction paths.
    pub fn randomize_gates(&mut self, std: f64, seed: u64) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let mut rng = seed::derived_rng(seed, Stream::Init, u64::MAX);
        for r in [self.layout.q_in.gate.w(), self.layout.q_out.gate.w()] {
            for x in &mut self.data[r] {
                *x = F::from_f64(dist.sample(&mut rng));
            }
        }
    }
}
