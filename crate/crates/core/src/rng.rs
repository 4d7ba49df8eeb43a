//! Seeded random streams. Every consumer of randomness draws from its own
//! `(seed, stream)` pair so that runs are reproducible and resumable from
//! counters alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. The low 32 bits are free for a sub-index such as an
/// epoch number or a class/patch pair.
pub mod stream {
    pub const INIT_E: u64 = 1 << 32;
    pub const INIT_D: u64 = 2 << 32;
    pub const INIT_C: u64 = 3 << 32;
    pub const INIT_T: u64 = 4 << 32;
    pub const SYNTH_TEMPLATE: u64 = 5 << 32;
    pub const SYNTH_NOISE: u64 = 6 << 32;
    pub const SPLIT: u64 = 7 << 32;
    pub const BATCH_U: u64 = 8 << 32;
    pub const BATCH_TR: u64 = 9 << 32;
    pub const BATCH_VAL: u64 = 10 << 32;
    pub const AUGMENT: u64 = 11 << 32;
    pub const PROBE: u64 = 12 << 32;
}

pub fn rng_for(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
