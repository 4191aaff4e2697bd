//! Seeded random streams.
//!
//! One root seed feeds every consumer; each consumer gets its own ChaCha
//! stream so that adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    EncoderInit = 1,
    ModelInit = 2,
    Prototypes = 3,
    BatchSampling = 4,
    Augmentation = 5,
    DatasetIndex = 6,
    SyntheticData = 7,
    Textures = 8,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Independent sub-stream of `which`, e.g. one per generated sample.
pub fn substream(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}
