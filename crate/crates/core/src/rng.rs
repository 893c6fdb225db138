//! Seeded random streams. Every stochastic routine takes an explicit
//! generator derived from a 64-bit seed and a stream id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids keep the independent consumers of one seed apart.
pub mod stream {
    pub const CENTERS: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const MIXMATCH: u64 = 6;
    pub const UNLABELED: u64 = 7;
    pub const TEST_SAMPLES: u64 = 8;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
