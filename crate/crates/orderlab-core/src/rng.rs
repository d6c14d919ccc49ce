//! Counter-based seed derivation.
//!
//! Every random decision in the library draws from a `ChaCha8Rng` whose seed
//! is derived from a parent seed plus a salt via splitmix64. Substreams are
//! therefore independent of iteration order: episode `t` of a stream always
//! sees the same bits no matter what was sampled before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Salts for the library's independent random substreams.
pub mod salt {
    pub const DOMAIN: u64 = 0x01;
    pub const DOMAIN_EVAL: u64 = 0x02;
    pub const OOD_POOL: u64 = 0x03;
    pub const EPISODE: u64 = 0x04;
    pub const EPISODE_LABELED: u64 = 0x05;
    pub const EPISODE_UNLABELED: u64 = 0x06;
    pub const EPISODE_OOD: u64 = 0x07;
    pub const EPISODE_SHUFFLE: u64 = 0x08;
    pub const EVAL_EPISODE: u64 = 0x09;
    pub const JOINT_PICK: u64 = 0x0a;
    pub const MODEL_INIT: u64 = 0x0b;
    pub const DECODER_INIT: u64 = 0x0c;
    pub const CRITIC_INIT: u64 = 0x0d;
    pub const RESERVOIR: u64 = 0x0e;
    pub const MEMORY_BATCH: u64 = 0x0f;
    pub const STREAM: u64 = 0x10;
}

/// splitmix64 finalizer; a cheap, well-mixed 64-bit hash.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a `salt`.
pub fn mix(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// Derive a child seed with an additional counter (e.g. episode index).
pub fn mix2(seed: u64, salt: u64, counter: u64) -> u64 {
    splitmix64(mix(seed, salt) ^ splitmix64(counter.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// The RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
