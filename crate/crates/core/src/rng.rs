//! Keyed, counter-based random streams.
//!
//! Every random draw in the toolkit comes from a ChaCha stream whose key is
//! a pure function of (domain, seed, keys). Two calls with the same key see
//! the same numbers no matter how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Keeping them distinct prevents e.g. the probe init and
/// the noising stream from colliding when they share a seed.
pub mod domain {
    pub const NOISE_DETERMINISTIC: u64 = 0x6e6f_6973_6564_6574;
    pub const NOISE_STOCHASTIC: u64 = 0x6e6f_6973_6573_746f;
    pub const BACKBONE_INIT: u64 = 0x6261_636b_626f_6e65;
    pub const PROBE_INIT: u64 = 0x7072_6f62_6569_6e69;
    pub const PROBE_SHUFFLE: u64 = 0x7072_6f62_6573_6875;
    pub const FUSION_INIT: u64 = 0x6675_7369_6f6e_696e;
    pub const SYNTHETIC: u64 = 0x7379_6e74_6865_7469;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn keyed(domain: u64, seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut words = [
        splitmix64(domain),
        splitmix64(seed ^ 0x5851_f42d_4c95_7f2d),
        splitmix64(keys.len() as u64),
        0u64,
    ];
    for (i, &k) in keys.iter().enumerate() {
        let slot = i % 4;
        words[slot] = splitmix64(words[slot] ^ splitmix64(k.wrapping_add(i as u64)));
    }
    let mut bytes = [0u8; 32];
    for (chunk, w) in bytes.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
