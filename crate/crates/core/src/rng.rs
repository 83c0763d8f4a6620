//! Counter-based random streams.
//!
//! Every random draw in the library comes from a stream keyed by
//! `(master seed, purpose, sub-id, index)`, so results never depend on how
//! replicates are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// What a stream is used for; keeps streams for different jobs disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Population = 1,
    Genealogy = 2,
    Sampling = 3,
    Density = 4,
    HsTransform = 5,
    Estimator = 6,
    Oracle = 7,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn seed_bytes(words: [u64; 4]) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (chunk, w) in out.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    out
}

/// Root key for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedKey {
    pub seed: u64,
}

impl SeedKey {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, purpose: Purpose, sub: u64, index: u64) -> Stream {
        let a = splitmix(self.seed);
        let b = splitmix(a ^ purpose as u64);
        let c = splitmix(b ^ sub);
        let d = splitmix(c ^ 0x5851_f42d_4c95_7f2d);
        let mut rng = ChaCha8Rng::from_seed(seed_bytes([a, b, c, d]));
        rng.set_stream(index);
        rng
    }
}

/// Derives an independent stream from the current state of `rng` without
/// drawing from it.
pub fn fork(rng: &Stream, tag: u64) -> Stream {
    let seed = rng.get_seed();
    let mut words = [0u64; 4];
    for (w, chunk) in words.iter_mut().zip(seed.chunks_exact(8)) {
        *w = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    let pos = rng.get_word_pos();
    let mix = splitmix(rng.get_stream() ^ splitmix(tag) ^ splitmix(pos as u64) ^ splitmix((pos >> 64) as u64 ^ 0xa5a5));
    for w in &mut words {
        *w = splitmix(*w ^ mix);
    }
    ChaCha8Rng::from_seed(seed_bytes(words))
}
