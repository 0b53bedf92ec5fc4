//! Counter-based stream derivation.
//!
//! Every random draw is addressed by `(master seed, instance index, time)`.
//! The first two pick a ChaCha key, the time picks the stream, so any slice of
//! any instance can be regenerated independently of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key for instance `index` under `master`.
pub fn instance_key(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Generator for time slot `slot` of instance `index`.
pub fn stream(master: u64, index: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_key(master, index));
    rng.set_stream(slot);
    rng
}

/// Generator for auxiliary, non time-indexed draws (replicate seeds, splits).
pub fn aux(master: u64, tag: u64) -> ChaCha8Rng {
    stream(master, tag, u64::MAX)
}
