//! Seeded PRNG streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from an explicit `(seed, stream)` pair so runs replay exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SUBSAMPLE: u64 = 3;
    pub const DEV_SPLIT: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const SYNTH: u64 = 6;
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Stream keyed by a purpose and a sub-index (epoch, sample number, ...).
pub fn substream(seed: u64, purpose: u64, index: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(purpose);
    r
}
