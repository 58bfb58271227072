//! Seed derivation. Every random stream in the engine is a pure function of
//! the root seed plus a stream tag and an index, so any step can be replayed
//! without carrying generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) mod stream {
    pub const INIT: u64 = 0x494e_4954;
    pub const DROPOUT: u64 = 0x4452_4f50;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const EPOCH: u64 = 0x4550_4f43;
    pub const CAPTION: u64 = 0x4341_5054;
    pub const VALIDATION: u64 = 0x5641_4c49;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ stream) ^ index)
}

pub fn derive_rng(root: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, index))
}
