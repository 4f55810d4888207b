//! Seeded random streams. Every consumer derives its own ChaCha stream from
//! the run seed plus a purpose tag, so no stream depends on how much another
//! one has been drawn from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `seed` under the given path of tags.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let mixed = tags
        .iter()
        .fold(splitmix(seed), |acc, t| splitmix(acc ^ splitmix(*t)));
    ChaCha8Rng::seed_from_u64(mixed)
}

pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const DATA: u64 = 4;
    pub const CHECK: u64 = 5;
}
