//! Seed-derived random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream identified by
//! `(seed, purpose, index)`, so a stream can be rebuilt from counters alone.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Cipher = 1,
    Generate = 2,
    Noise = 3,
    Split = 4,
    Shuffle = 5,
    Dropout = 6,
    Init = 7,
    Check = 8,
    Clean = 9,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}

/// A seed for a sub-component that owns its own stream family.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    stream(seed, purpose, index).next_u64()
}
