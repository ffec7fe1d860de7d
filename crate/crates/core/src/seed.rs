//! Deterministic seed derivation.
//!
//! A single master seed fans out into independent ChaCha streams keyed by
//! `(stream, index)` pairs, so results never depend on evaluation order or
//! thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known stream identifiers.
pub mod stream {
    pub const DESIGN: u64 = 1;
    pub const SIGNAL: u64 = 2;
    pub const AUX: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const STATE_EVOLUTION: u64 = 6;
    pub const CHANNEL_MC: u64 = 7;
    pub const POSTERIOR_Y: u64 = 8;
    pub const TASK: u64 = 9;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent seed with a stream id and an index into a child seed.
pub fn derive(parent: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(parent ^ splitmix(stream)) ^ splitmix(index.wrapping_add(0x5851_F42D)))
}

pub fn rng(parent: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parent, stream, index))
}
