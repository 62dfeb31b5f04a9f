//! Screenplay parsing, few-shot character-guessing benchmark construction,
//! the character encoder and meta-learners, evaluation, and the guessing
//! game session logic.

pub mod benchmark;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod game;
pub mod learners;
pub mod screenplay;
pub mod synth;

pub use error::{Error, Result};

/// Mixes a base seed with a string tag (FNV-1a, then a SplitMix64 finalizer)
/// so independent random streams stay stable when unrelated inputs change.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
