//! Deterministic RNG streams.
//!
//! Every sampling operation takes an explicit RNG handle. Parallel sections
//! derive one independent stream per work item from `(seed, stream, index)`,
//! so results do not depend on thread scheduling.

use rand_chacha::ChaCha8Rng;

/// Stream tags keep different uses of the same base seed independent.
pub mod stream {
    pub const THRESHOLD_REFRESH: u64 = 0x7452;
    pub const GRAD: u64 = 0x6744;
    pub const BINARIZE: u64 = 0xb17a;
    pub const EVAL: u64 = 0xe7a1;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes two words into one well-spread index, for composite stream keys.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// Independent RNG for work item `index` of stream `stream` under `seed`.
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut state = splitmix64(seed ^ splitmix64(stream) ^ splitmix64(index.wrapping_mul(0x9e37)));
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
