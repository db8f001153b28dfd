//! Windowed transformer: a causal backbone wrapped by an input encoder that
//! compresses each k-symbol window into one vector and an output decoder
//! that expands each hidden state into k slot distributions.
//!
//! Both wrappers are residual. The encoder's base path is the embedding of
//! the window's first symbol, the decoder's is the plain output head; the
//! query-transformer corrections are added through zero-initialized gates.

mod forward;
mod incremental;
mod params;

pub use forward::{backward_batch, forward_batch, q_in_tables, ForwardCache, QInTables, SequenceInput};
pub use incremental::{forward_class_step, forward_step, DecodeState};
pub use params::{
    BlockLayout, Entry, Init, Layout, Linear, ModelConfig, ModelParams, Norm, QInLayerLayout,
    QInLayout, QOutLayerLayout, QOutLayout,
};

pub(crate) use forward::{backward_batch_into, check_inputs, forward_batch_unchecked};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::tensorize::{validate_window, Window};

/// Logits `T × k × V` and final-norm hidden states `T × d` for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<F> {
    pub logits: Vec<F>,
    pub hidden: Vec<F>,
}

impl<F: Real> ForwardOutput<F> {
    /// Logits of window slot `j` at output row `t`.
    pub fn slot(&self, cfg: &ModelConfig, t: usize, j: usize) -> &[F] {
        let v = cfg.vocab_size;
        let start = (t * cfg.k + j) * v;
        &self.logits[start..start + v]
    }
}

/// Full teacher-forced forward over `T` input windows. Row 0 of the output
/// (the class position) predicts window 0 and row `t` predicts window `t`
/// from windows `0..t`.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    class_label: usize,
    input_windows: &[Window],
) -> Result<ForwardOutput<F>> {
    let cfg = &params.config;
    if input_windows.len() != cfg.seq_len {
        return Err(Error::param(format!(
            "expected {} input windows, got {}",
            cfg.seq_len,
            input_windows.len()
        )));
    }
    let mut flat = Vec::with_capacity(cfg.seq_len * cfg.k);
    for w in input_windows {
        if w.k() != cfg.k {
            return Err(Error::param(format!("window of {} symbols, expected {}", w.k(), cfg.k)));
        }
        w.validate(cfg.vocab_size)?;
        flat.extend_from_slice(&w.tokens);
    }
    let (logits, cache) = forward_batch(
        params,
        &[SequenceInput {
            class_label,
            windows: &flat,
        }],
    )?;
    Ok(ForwardOutput {
        logits,
        hidden: cache.hidden().to_vec(),
    })
}

/// Input encoder applied to one window: `embed(w[0]) + gate(Q_in(w))`.
pub fn encode_window<F: Real>(params: &ModelParams<F>, window: &Window) -> Result<Vec<F>> {
    let cfg = &params.config;
    if window.k() != cfg.k {
        return Err(Error::param(format!("window of {} symbols, expected {}", window.k(), cfg.k)));
    }
    validate_window(&window.tokens, cfg.vocab_size)?;
    let tables = q_in_tables(params);
    Ok(forward::q_in_forward(params, &tables, &window.tokens, 1).0)
}

/// Output decoder applied to one hidden state: `k × V` logits.
pub fn decode_hidden<F: Real>(params: &ModelParams<F>, hidden: &[F]) -> Result<Vec<F>> {
    if hidden.len() != params.config.d_model {
        return Err(Error::param(format!(
            "hidden state has {} entries, expected {}",
            hidden.len(),
            params.config.d_model
        )));
    }
    if hidden.iter().any(|x| !x.is_finite()) {
        return Err(Error::param("hidden state is not finite"));
    }
    Ok(forward::q_out_forward(params, hidden, 1).0)
}
