//! Seed derivation.
//!
//! Every random stream in an experiment is keyed by `(master_seed, stream, index)`
//! through [`derive_seed`], so one master seed fixes the whole run and streams
//! never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Model = 2,
    Probe = 3,
    Partition = 4,
    Missing = 5,
    Completion = 6,
    Round = 7,
    Sampling = 8,
    ClientInit = 9,
    Placeholder = 10,
    Shuffle = 11,
}

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(seed ⊕ splitmix64(stream · 2⁴⁰ + index))`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(((stream as u64) << 40).wrapping_add(index)))
}

pub fn rng_for(seed: u64, stream: Stream, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, stream, index))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
