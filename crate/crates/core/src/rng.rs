//! Seeded random streams.
//!
//! Every source of randomness is derived from one run seed plus a stream name,
//! so changing how one stream is consumed never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_INIT: &str = "init";
pub const STREAM_SHUFFLE: &str = "shuffle";
pub const STREAM_NOUN: &str = "noun-choice";

pub fn substream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Stream keyed by a name and an extra integer (e.g. an epoch or a record index).
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
