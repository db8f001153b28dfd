//! Overlapping next-window autoregressive modeling over discrete token grids.
//!
//! A sequence of `T` tokens is rewritten as `T` overlapping windows of `k`
//! tokens. A causal transformer predicts each next window from the windows
//! before it, inputs are corrupted position-wise during training so the
//! model cannot simply copy the overlap, and sampling commits one token per
//! step while the rest of the window is carried forward and refined.
//!
//! The crate trains and evaluates such models on synthetic lattice data
//! whose conditionals are known exactly ([`toydata`]).

pub mod cli;
pub mod decode;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod seed;
pub mod tensorize;
pub mod toydata;
pub mod train;

pub use error::{Error, Result};
