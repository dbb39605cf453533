//! Deterministic derivation of independent random streams from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Map 64 random bits to [0, 1).
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stream domains, so that e.g. particle 3 at step 7 never shares a stream
/// with the resampler at step 7.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Propagate = 1,
    Resample = 2,
    Fill = 3,
    Mcmc = 4,
    Reference = 5,
}

/// An RNG keyed by `(seed, stream, a, b)`.
pub fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let key = mix(mix(mix(seed) ^ stream as u64) ^ a.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ b;
    ChaCha8Rng::seed_from_u64(mix(key))
}
