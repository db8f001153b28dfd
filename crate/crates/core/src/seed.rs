//! Deterministic seed derivation.
//!
//! Every stochastic routine takes an explicit `u64` seed. Child seeds are
//! derived by hashing `(parent, stream, index)` so parallel workers never
//! share generator state and results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent uses of one parent seed from colliding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Spec = 1,
    Sample = 2,
    Corrupt = 3,
    Batch = 4,
    Init = 5,
    Decode = 6,
    Split = 7,
    Probe = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(parent: u64, stream: Stream, index: u64) -> u64 {
    let a = splitmix64(parent ^ (stream as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(parent: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    rng(derive(parent, stream, index))
}
