//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a base seed plus a path of integers (epoch, batch, sample...),
//! so work can be split across threads without sharing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x5151))))
}

pub fn stream(base: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, path))
}
