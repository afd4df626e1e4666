//! Seed derivation.
//!
//! Every random stream in a run is derived from one master seed:
//!
//! ```text
//! derive(master, label) = splitmix64(master ^ splitmix64(fnv1a64(label)))
//! ```
//!
//! `fnv1a64` is the 64-bit FNV-1a hash of the label's UTF-8 bytes and
//! `splitmix64` is a single output step of the SplitMix64 generator
//! (golden-gamma increment followed by the standard finalizer). Labels in use:
//! `"split"`, `"wild-split"`, `"scenario"`, and `"scenario/<source>/<role>"`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives an independent component seed from a master seed and a stream label.
pub fn derive(master: u64, label: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a64(label.as_bytes())))
}

/// The generator used for every random stream in the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
