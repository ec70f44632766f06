//! Fixtures shared by the criterion benches.

use cag_core::graph::ModeFlags;
use cag_core::init::uniform;
use cag_core::model::{Example, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 120;
pub const OBJECTS: usize = 6;
pub const D_V: usize = 17;

/// Toy-scale model: `d=64, d_w=32, K=4, T=3`.
pub fn config(flags: ModeFlags) -> ModelConfig {
    ModelConfig {
        d: 64,
        d_w: 32,
        d_v: D_V,
        vocab: VOCAB,
        flags,
        dropout: 0.3,
    }
}

pub fn flags() -> ModeFlags {
    ModeFlags {
        k: 4,
        t: 3,
        ..ModeFlags::default()
    }
}

fn words<R: Rng>(rng: &mut R, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(2..VOCAB)).collect()
}

/// A dialog turn shaped like the synthetic corpus: 6 objects, caption plus 5 rounds, 10 candidates.
pub fn example(seed: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Example {
        features: uniform(&mut rng, &[D_V, OBJECTS], 1.0).unwrap(),
        history: (0..6).map(|i| words(&mut rng, if i == 0 { 6 } else { 8 })).collect(),
        question: words(&mut rng, 7),
        candidates: (0..10).map(|_| words(&mut rng, 2)).collect(),
        gt: rng.gen_range(0..10),
    }
}
