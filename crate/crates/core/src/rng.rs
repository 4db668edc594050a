//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a user seed and a
//! purpose tag, so adding draws in one place never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Crop = 2,
    Context = 3,
    Evaluation = 4,
    Sampling = 5,
}

/// A reproducible stream for `purpose`, further split by `index` (piece, ordering, chain...).
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}
