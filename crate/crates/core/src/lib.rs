//! Patch-level memory bank anomaly detection.
//!
//! The engine consumes pre-extracted multi-level feature maps of nominal
//! images, builds a memory bank of locally aware patch features, reduces it
//! with greedy k-center coreset selection, and scores test images by
//! nearest-neighbour distance at both image and pixel level.
//!
//! Seeded randomness: every random draw comes from ChaCha8 (`rand_chacha`)
//! seeded with [`seeded_stream`], one stream id per purpose. Normal variates
//! use `rand_distr::StandardNormal` (ziggurat). Streams are reproducible
//! across builds of this repository with the locked dependency versions.

pub mod config;
pub mod coreset;
pub mod error;
pub mod metrics;
pub mod patchify;
pub mod pipeline;
pub mod resample;
pub mod scoring;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Stream ids used by the library; distinct purposes never share a stream.
pub mod streams {
    pub const PROJECTION: u64 = 1;
    pub const FIRST_PICK: u64 = 2;
    pub const RANDOM_SUBSAMPLE: u64 = 3;
    pub const PROXY_INIT: u64 = 4;
    pub const LOWSHOT: u64 = 5;
    pub const SYNTH: u64 = 6;
}

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn seeded_stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Squared Euclidean distance, accumulated sequentially in f64.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc
}

#[inline]
pub fn l2(a: &[f32], b: &[f32]) -> f64 {
    squared_l2(a, b).sqrt()
}
