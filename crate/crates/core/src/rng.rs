//! Independent random streams derived from one master seed.
//!
//! Each consumer gets its own ChaCha stream, so drawing more numbers in one
//! place never shifts the numbers seen anywhere else.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Sampler = 3,
    Shuffle = 4,
    Data = 5,
    Noise = 6,
}

/// Generator for `(stream, index)` under `master`.
pub fn stream(master: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((which as u64) << 40) ^ index);
    rng
}

/// A single derived seed, for APIs that take a `u64`.
pub fn derive_seed(master: u64, which: Stream, index: u64) -> u64 {
    stream(master, which, index).next_u64()
}
