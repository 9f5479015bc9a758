//! Counter-keyed random streams.
//!
//! Every random draw in training and evaluation comes from a generator keyed
//! by `(seed, purpose, epoch, batch)`, so results never depend on the order in
//! which batches or runs are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    LatentNoise = 4,
    CopulaNoise = 5,
    Prior = 6,
    GradCheck = 7,
    Corpus = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, epoch: u64, batch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let words = [seed, purpose as u64, epoch, batch];
    let mut state = 0u64;
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        state = splitmix64(state ^ w);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// `n` independent standard-normal draws.
pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
