//! Deterministic seed derivation.
//!
//! Every random stream in the crate is derived from one user seed:
//! `derive(root, stream, index) = splitmix64(splitmix64(root ^ stream) ^ index)`.
//! Datasets and training use disjoint stream tags, so regenerating data never
//! shifts the randomness of a training run and vice versa.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PHANTOM: u64 = 0x5048_414e_544f_4d00;
pub const MASK: u64 = 0x4d41_534b_0000_0000;
pub const NOISE: u64 = 0x4e4f_4953_4500_0000;
pub const SAMPLE: u64 = 0x5341_4d50_4c45_0000;
pub const INIT: u64 = 0x494e_4954_0000_0000;
pub const SHUFFLE: u64 = 0x5348_5546_464c_4500;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ stream) ^ index)
}

pub fn rng(root: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, stream, index))
}
