//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by the master seed, with the
//! 64-bit ChaCha stream id selecting a (purpose, replica) pair and the block
//! counter advancing with the draws. Streams never overlap and do not depend
//! on scheduling, so replicas can run on any number of threads and still
//! reproduce bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Keeps e.g. warm-up draws independent of the
/// coupled-run draws of the same replica.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Chain = 1,
    WarmUp = 2,
    Coupling = 3,
    States = 4,
    Trials = 5,
}

/// The stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    assert!(index < 1 << 56, "stream index {index} out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | index);
    rng
}

#[inline]
pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for o in out {
        *o = rng.sample(StandardNormal);
    }
}

#[inline]
pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    fill_standard_normal(rng, &mut v);
    v
}

/// A uniform draw on [0, 1).
#[inline]
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
