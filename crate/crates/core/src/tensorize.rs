//! Overlapping-window view of a token sequence.
//!
//! Window `t` holds tokens `t..t+k`; positions past the sequence end carry
//! the padding symbol `Δ = V`. Target window `t` is input window `t + 1`.

use crate::error::{Error, Result};
use crate::toydata::TokenId;

/// Padding symbol for a vocabulary of `vocab_size` tokens.
#[inline]
pub fn padding(vocab_size: usize) -> TokenId {
    vocab_size as TokenId
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Window {
    pub tokens: Vec<TokenId>,
}

impl Window {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Window { tokens }
    }

    pub fn k(&self) -> usize {
        self.tokens.len()
    }

    /// Checks symbol range and that Δ only forms a suffix.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        validate_window(&self.tokens, vocab_size)
    }

    pub fn padding_count(&self, vocab_size: usize) -> usize {
        let pad = padding(vocab_size);
        self.tokens.iter().filter(|&&t| t == pad).count()
    }
}

pub(crate) fn validate_window(tokens: &[TokenId], vocab_size: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::param("window must hold at least one symbol"));
    }
    let pad = padding(vocab_size);
    let mut seen_pad = false;
    for (j, &t) in tokens.iter().enumerate() {
        if t > pad {
            return Err(Error::param(format!("window symbol {t} at slot {j} exceeds Δ={pad}")));
        }
        if t == pad {
            seen_pad = true;
        } else if seen_pad {
            return Err(Error::param(format!(
                "window {tokens:?} has a token after padding"
            )));
        }
    }
    Ok(())
}

/// `T` input windows, `T` target windows, and the `T × k` target mask,
/// all stored flat in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedSequence {
    pub seq_len: usize,
    pub k: usize,
    pub vocab_size: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl WindowedSequence {
    pub fn input_window(&self, t: usize) -> &[TokenId] {
        &self.inputs[t * self.k..(t + 1) * self.k]
    }

    pub fn target_window(&self, t: usize) -> &[TokenId] {
        &self.targets[t * self.k..(t + 1) * self.k]
    }

    pub fn mask_row(&self, t: usize) -> &[bool] {
        &self.loss_mask[t * self.k..(t + 1) * self.k]
    }

    pub fn input_windows(&self) -> Vec<Window> {
        self.inputs.chunks(self.k).map(|w| Window::new(w.to_vec())).collect()
    }

    /// Targets aligned with model output rows: row 0 (the class position)
    /// predicts window 0 and row `t` predicts window `t`, i.e. target
    /// window `t - 1`. Returns `(targets, mask)`, both `T × k`.
    pub fn prediction_targets(&self) -> (Vec<TokenId>, Vec<bool>) {
        let k = self.k;
        let pad = padding(self.vocab_size);
        let mut targets = Vec::with_capacity(self.seq_len * k);
        let mut mask = Vec::with_capacity(self.seq_len * k);
        targets.extend_from_slice(self.input_window(0));
        mask.extend(self.input_window(0).iter().map(|&s| s != pad));
        if self.seq_len > 1 {
            let n = (self.seq_len - 1) * k;
            targets.extend_from_slice(&self.targets[..n]);
            mask.extend_from_slice(&self.loss_mask[..n]);
        }
        (targets, mask)
    }
}

/// Builds the overlapping-window view of `tokens`.
pub fn to_windows(tokens: &[TokenId], k: usize, vocab_size: usize) -> Result<WindowedSequence> {
    let t_len = tokens.len();
    if k == 0 || k > t_len {
        return Err(Error::param(format!(
            "window size {k} must lie in [1, {t_len}]"
        )));
    }
    if let Some((i, &t)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= vocab_size)
    {
        return Err(Error::param(format!(
            "token {t} at position {i} outside vocabulary of {vocab_size}"
        )));
    }
    let pad = padding(vocab_size);
    let at = |i: usize| tokens.get(i).copied().unwrap_or(pad);
    let mut inputs = Vec::with_capacity(t_len * k);
    let mut targets = Vec::with_capacity(t_len * k);
    let mut loss_mask = Vec::with_capacity(t_len * k);
    for t in 0..t_len {
        for j in 0..k {
            inputs.push(at(t + j));
            let target = at(t + 1 + j);
            targets.push(target);
            loss_mask.push(target != pad);
        }
    }
    Ok(WindowedSequence {
        seq_len: t_len,
        k,
        vocab_size,
        inputs,
        targets,
        loss_mask,
    })
}

/// Returns the first `seq_len` committed tokens, rejecting padding or
/// out-of-vocabulary symbols among them.
pub fn from_committed(
    committed: &[TokenId],
    seq_len: usize,
    vocab_size: usize,
) -> Result<Vec<TokenId>> {
    if committed.len() < seq_len {
        return Err(Error::Consistency(format!(
            "only {} committed tokens for a sequence of {seq_len}",
            committed.len()
        )));
    }
    let head = &committed[..seq_len];
    if let Some(i) = head.iter().position(|&t| t as usize >= vocab_size) {
        return Err(Error::Consistency(format!(
            "committed position {i} holds symbol {} (padding is {vocab_size})",
            head[i]
        )));
    }
    Ok(head.to_vec())
}
