//! Deterministic named random streams.
//!
//! All randomness in a run flows from one seed through labelled ChaCha
//! streams (`data`, `noise`, `dropout`, `init`, ...), so toggling one
//! consumer never perturbs another's draws. Stream state round-trips through
//! checkpoints via [`RngState`].

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// The stream named `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> ChaCha12Rng {
    indexed_stream(seed, label, 0)
}

/// Per-item substream: item `index` of the stream named `label`.
/// Depends only on `(seed, label, index)`, enabling order-independent
/// parallel generation.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(fnv1a(label.as_bytes()) ^ splitmix64(index)));
    rng
}

/// Serializable snapshot of a ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha12Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
