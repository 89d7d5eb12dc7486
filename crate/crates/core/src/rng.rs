//! Seeded, splittable randomness.
//!
//! Every consumer derives an independent ChaCha stream from `(seed, purpose, index)`,
//! so results do not depend on the order in which consumers draw numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Synthetic = 2,
    Batching = 3,
    Dropout = 4,
    Split = 5,
}

/// Independent generator for `(seed, stream, index)`.
pub fn derive(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
