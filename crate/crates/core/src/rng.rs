//! Counter-keyed random streams.
//!
//! Every random decision in the pipeline is drawn from a ChaCha8 stream whose
//! 256-bit key is derived from `(global_seed, tag)` with SplitMix64 and whose
//! 64-bit stream id is a record index (a line number, a step number, ...).
//! The output therefore depends only on those three values, never on
//! processing order, thread count or platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Operation tags used to separate streams that share a seed and index.
pub mod tag {
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const DROPOUT: u64 = 0x4452_4f50;
    pub const DROPOUT_FALLBACK: u64 = 0x4641_4c4c;
    pub const BLANK: u64 = 0x424c_4e4b;
    pub const CODE_SWITCH: u64 = 0x4353_5743;
    pub const ONCE: u64 = 0x4f4e_4345;
    pub const SIDE_SOURCE: u64 = 0x5352_4353;
    pub const SIDE_TARGET: u64 = 0x5452_4754;
    pub const EPOCH_ORDER: u64 = 0x4550_4f43;
    pub const LANGUAGE: u64 = 0x4c41_4e47;
    pub const MODEL_INIT: u64 = 0x494e_4954;
    pub const MODEL_DROPOUT: u64 = 0x4d44_524f;
    pub const STREAM: u64 = 0x5354_524d;
    pub const RENOISE: u64 = 0x524e_4f49;
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const SPLIT: u64 = 0x5350_4c54;
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// A random stream identified by a global seed and a record index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub global_seed: u64,
    pub line_index: u64,
}

impl RngStream {
    pub fn new(global_seed: u64, line_index: u64) -> Self {
        Self {
            global_seed,
            line_index,
        }
    }

    /// Opens the sub-stream for one operation.
    pub fn open(&self, op_tag: u64) -> ChaCha8Rng {
        keyed_rng(derive_seed(self.global_seed, op_tag), self.line_index)
    }
}

/// ChaCha8 keyed by `seed`, positioned on stream `index`.
pub fn keyed_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = seed;
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
