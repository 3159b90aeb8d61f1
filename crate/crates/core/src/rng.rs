//! Seeded random streams. Every stochastic component takes an explicit
//! [`StdStream`]; nothing reads global randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StdStream = ChaCha8Rng;

pub fn stream(seed: u64) -> StdStream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose from a base seed.
pub fn substream(seed: u64, purpose: u64) -> StdStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SYNTH: u64 = 6;
}
