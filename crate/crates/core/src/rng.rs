//! Seeded random streams. Every consumer derives its own ChaCha stream from
//! `(seed, stream)` so generation order never couples unrelated components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Stream tags for the top-level consumers of a run seed.
pub mod tags {
    pub const PARAMS: u64 = 1;
    pub const TRAIN_SPLIT: u64 = 2;
    pub const VAL_SPLIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SCENES: u64 = 5;
}
