//! Position-wise categorical corruption of input windows.
//!
//! Slot `j` of a window is resampled uniformly over the vocabulary with
//! probability `β(j)`; slot 0 is always clean. Since the uniform draw may
//! return the original symbol, the per-slot law is exactly
//! `(1 − β(j))·onehot(x) + β(j)/V`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensorize::{padding, WindowedSequence};
use crate::toydata::TokenId;

pub const DEFAULT_EXPONENT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    /// `β ≡ 0`: inputs are never corrupted.
    None,
    Linear,
    Sine,
    Sqrt,
    Exponential,
}

impl ScheduleKind {
    pub const NOISY: [ScheduleKind; 4] = [
        ScheduleKind::Linear,
        ScheduleKind::Sine,
        ScheduleKind::Sqrt,
        ScheduleKind::Exponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::None => "none",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Sine => "sine",
            ScheduleKind::Sqrt => "sqrt",
            ScheduleKind::Exponential => "exponential",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => ScheduleKind::None,
            "linear" => ScheduleKind::Linear,
            "sine" => ScheduleKind::Sine,
            "sqrt" => ScheduleKind::Sqrt,
            "exponential" => ScheduleKind::Exponential,
            other => {
                return Err(Error::param(format!(
                    "unknown noise kind {other:?} (expected none, linear, sine, sqrt, exponential)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub k: usize,
    /// Only used by [`ScheduleKind::Exponential`].
    pub exponent: f64,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, k: usize) -> Result<Self> {
        Self::with_exponent(kind, k, DEFAULT_EXPONENT)
    }

    pub fn with_exponent(kind: ScheduleKind, k: usize, exponent: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("window size must be >= 1"));
        }
        if !(exponent.is_finite() && exponent > 0.0) {
            return Err(Error::param(format!("exponent must be positive, got {exponent}")));
        }
        Ok(NoiseSchedule { kind, k, exponent })
    }

    pub fn none(k: usize) -> Result<Self> {
        Self::new(ScheduleKind::None, k)
    }

    /// Corruption probability at window slot `j`.
    ///
    /// Positions are normalized to `u = j / (k − 1)` so every kind runs
    /// from exactly 0 at the first slot to exactly 1 at the last.
    pub fn beta(&self, j: usize) -> Result<f64> {
        if j >= self.k {
            return Err(Error::param(format!("slot {j} outside window of {}", self.k)));
        }
        if self.k == 1 || j == 0 || self.kind == ScheduleKind::None {
            return Ok(0.0);
        }
        if j == self.k - 1 {
            return Ok(1.0);
        }
        let u = j as f64 / (self.k - 1) as f64;
        Ok(match self.kind {
            ScheduleKind::None => 0.0,
            ScheduleKind::Linear => u,
            ScheduleKind::Sine => (std::f64::consts::FRAC_PI_2 * u).sin(),
            ScheduleKind::Sqrt => u.sqrt(),
            ScheduleKind::Exponential => u.powf(self.exponent),
        })
    }

    pub fn betas(&self) -> Vec<f64> {
        (0..self.k).map(|j| self.beta(j).expect("slot in range")).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.betas().iter().all(|&b| b == 0.0)
    }
}

/// Per-slot loss weights `w_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub w: Vec<f64>,
}

impl LossWeights {
    pub fn uniform(k: usize) -> Self {
        LossWeights { w: vec![1.0; k] }
    }

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::param("loss weights must not be empty"));
        }
        if let Some(x) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::param(format!("loss weight {x} is not a finite nonnegative value")));
        }
        Ok(LossWeights { w })
    }
}

fn corrupt_slots(
    tokens: &mut [TokenId],
    betas: &[f64],
    vocab_size: usize,
    rng: &mut impl Rng,
) {
    let pad = padding(vocab_size);
    for (j, tok) in tokens.iter_mut().enumerate().skip(1) {
        let b = betas[j];
        if b <= 0.0 || *tok == pad {
            continue;
        }
        if rng.random::<f64>() < b {
            *tok = rng.random_range(0..vocab_size as TokenId);
        }
    }
}

/// Corrupts one window. Slot 0 and padding slots are left untouched.
pub fn corrupt_window(
    window: &[TokenId],
    schedule: &NoiseSchedule,
    vocab_size: usize,
    rng_seed: u64,
) -> Vec<TokenId> {
    assert_eq!(window.len(), schedule.k, "window length must match schedule");
    let mut out = window.to_vec();
    corrupt_slots(&mut out, &schedule.betas(), vocab_size, &mut seed::rng(rng_seed));
    out
}

/// Corrupts every input window with a seed derived from `(seed, window index)`.
/// Targets and mask pass through unchanged.
pub fn corrupt_batch(
    windowed: &WindowedSequence,
    schedule: &NoiseSchedule,
    seed: u64,
) -> WindowedSequence {
    let mut out = windowed.clone();
    corrupt_inputs_in_place(&mut out, schedule, seed);
    out
}

pub(crate) fn corrupt_inputs_in_place(
    windowed: &mut WindowedSequence,
    schedule: &NoiseSchedule,
    seed: u64,
) {
    assert_eq!(windowed.k, schedule.k, "window size mismatch");
    let betas = schedule.betas();
    if betas.iter().all(|&b| b == 0.0) {
        return;
    }
    let k = windowed.k;
    let v = windowed.vocab_size;
    for (t, win) in windowed.inputs.chunks_mut(k).enumerate() {
        let mut rng = seed::derived_rng(seed, Stream::Corrupt, t as u64);
        corrupt_slots(win, &betas, v, &mut rng);
    }
}
