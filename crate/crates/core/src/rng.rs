//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream whose seed is derived
//! from the master seed plus a key (epoch, sample id, pass index, ...). Results
//! therefore do not depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub key: String,
    pub stream: u64,
    /// Word position, decimal encoded (u128 does not fit JSON numbers).
    pub word_pos: String,
}

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        Self::capture(&ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let key: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState { key, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        if self.key.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(self.key.get(2 * i..2 * i + 2)?, 16).ok()?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Mixes a seed with a purpose tag, a string key and an integer key.
pub fn derive_seed(seed: u64, purpose: &str, key: &str, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ hash_str(purpose));
    h = splitmix64(h ^ hash_str(key));
    splitmix64(h ^ index)
}

pub fn derived_rng(seed: u64, purpose: &str, key: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, key, index))
}
