//! Seed derivation.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha::ChaCha8Rng`),
//! seeded with `seed_from_u64(seed)` and then moved onto a numbered stream with
//! `set_stream`. Distinct consumers (weight init, head init, batch order, class
//! means, sample draws) use distinct stream ids, so any one of them can be
//! reproduced in isolation from the `(seed, stream)` pair alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream id namespaces. The low 32 bits carry a per-consumer index.
pub mod streams {
    pub const EXTRACTOR_INIT: u64 = 1 << 32;
    pub const HEAD_INIT: u64 = 2 << 32;
    pub const BATCH_ORDER: u64 = 3 << 32;
    pub const CLASS_MEAN: u64 = 4 << 32;
    pub const TRAIN_SAMPLES: u64 = 5 << 32;
    pub const TEST_SAMPLES: u64 = 6 << 32;
    pub const RING_PLANE: u64 = 7 << 32;
    pub const JOINT_ORDER: u64 = 8 << 32;
}

pub fn derive(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
