//! Single-position forward with cached keys and values.

use crate::error::{Error, Result};
use crate::linalg::{self, gelu_forward, Real};
use crate::model::forward::{attend_row, lin_fwd, norm_fwd, q_in_forward, q_in_tables, q_out_forward, QInTables};
use crate::model::params::ModelParams;
use crate::tensorize::validate_window;
use crate::toydata::TokenId;

/// Incremental decoding state for one sequence.
///
/// Holds per-layer key/value caches for the positions fed so far, plus the
/// commit-and-refine bookkeeping used by the sampler: tokens already
/// committed, the `k − 1` provisional tokens carried to the next step, and
/// the step counter. A state is owned by exactly one decoder.
#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    pub class_label: usize,
    pub committed: Vec<TokenId>,
    pub provisional: Vec<TokenId>,
    pub step_index: usize,
    position: usize,
    capacity: usize,
    kv: Vec<Vec<F>>,
    tables: QInTables<F>,
}

impl<F: Real> DecodeState<F> {
    pub fn new(params: &ModelParams<F>, class_label: usize) -> Result<Self> {
        let cfg = &params.config;
        if class_label >= cfg.num_classes {
            return Err(Error::param(format!(
                "class {class_label} out of range ({} classes)",
                cfg.num_classes
            )));
        }
        let capacity = cfg.seq_len;
        Ok(DecodeState {
            class_label,
            committed: Vec::with_capacity(cfg.seq_len),
            provisional: Vec::new(),
            step_index: 0,
            position: 0,
            capacity,
            kv: vec![vec![F::ZERO; capacity * 2 * cfg.d_model]; cfg.n_layers],
            tables: q_in_tables(params),
        })
    }

    /// Number of sequence positions already in the cache.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Feeds the class position (sequence position 0) and returns the `k × V`
/// logits for window 0.
pub fn forward_class_step<F: Real>(params: &ModelParams<F>, state: &mut DecodeState<F>) -> Result<Vec<F>> {
    if state.position != 0 {
        return Err(Error::State(format!(
            "class position already fed ({} positions cached)",
            state.position
        )));
    }
    let d = params.config.d_model;
    let c = state.class_label;
    let cls = &params.data[params.layout.class_embedding.clone()][c * d..(c + 1) * d];
    let x = cls.to_vec();
    Ok(step(params, state, x))
}

/// Feeds one input window at the next sequence position and returns the
/// `k × V` logits predicting the following window.
pub fn forward_step<F: Real>(
    params: &ModelParams<F>,
    state: &mut DecodeState<F>,
    new_window: &[TokenId],
) -> Result<Vec<F>> {
    let cfg = &params.config;
    if state.position == 0 {
        return Err(Error::State("class position must be fed before any window".into()));
    }
    if state.position >= state.capacity {
        return Err(Error::State(format!(
            "decode state is full ({} positions)",
            state.capacity
        )));
    }
    if new_window.len() != cfg.k {
        return Err(Error::param(format!(
            "window has {} symbols, expected {}",
            new_window.len(),
            cfg.k
        )));
    }
    validate_window(new_window, cfg.vocab_size)?;
    let (enc, _) = q_in_forward(params, &state.tables, new_window, 1);
    Ok(step(params, state, enc))
}

fn step<F: Real>(params: &ModelParams<F>, state: &mut DecodeState<F>, mut x: Vec<F>) -> Vec<F> {
    let p = &params.data[..];
    let cfg = &params.config;
    let layout = &params.layout;
    let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let s = state.position;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let pos = &p[layout.position_embedding.clone()][s * d..(s + 1) * d];
    linalg::add_assign(&mut x, pos);

    let hid = cfg.mlp_hidden();
    let mut a = vec![F::ZERO; d];
    let mut qkv = vec![F::ZERO; 3 * d];
    let mut ctx = vec![F::ZERO; d];
    let mut tmp = vec![F::ZERO; d];
    let mut h1 = vec![F::ZERO; hid];
    let mut g = vec![F::ZERO; hid];
    let mut probs = vec![F::ZERO; s + 1];
    for (bl, cache) in layout.blocks.iter().zip(state.kv.iter_mut()) {
        norm_fwd(p, &bl.ln1, &x, &mut a, None);
        lin_fwd(p, &bl.qkv, &a, 1, &mut qkv);
        cache[s * 2 * d..(s + 1) * 2 * d].copy_from_slice(&qkv[d..]);
        for h in 0..heads {
            let o = h * dh;
            attend_row(
                &qkv[o..o + dh],
                cache,
                2 * d,
                o,
                d + o,
                s + 1,
                scale,
                &mut probs,
                &mut ctx[o..o + dh],
            );
        }
        lin_fwd(p, &bl.proj, &ctx, 1, &mut tmp);
        linalg::add_assign(&mut x, &tmp);
        norm_fwd(p, &bl.ln2, &x, &mut a, None);
        lin_fwd(p, &bl.fc1, &a, 1, &mut h1);
        gelu_forward(&h1, &mut g);
        lin_fwd(p, &bl.fc2, &g, 1, &mut tmp);
        linalg::add_assign(&mut x, &tmp);
    }
    let mut hidden = vec![F::ZERO; d];
    norm_fwd(p, &layout.ln_f, &x, &mut hidden, None);
    state.position += 1;
    q_out_forward(params, &hidden, 1).0
}
