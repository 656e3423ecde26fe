//! Counter-based pseudo-random stream.
//!
//! A stream is identified by `(seed, substream)`. Its `n`-th 64-bit output
//! is a keyed hash of the counter `n`:
//!
//! ```text
//! key    = mix64(seed ^ mix64(substream + GOLDEN_GAMMA))
//! out(n) = mix64(mix64(n ^ key) + key)
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer and all additions wrap. The
//! state is two words, every output depends only on `(seed, substream, n)`,
//! and transcendental functions used by the samplers come from `libm`, so
//! draws are bit-identical on every platform.

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer (a 64-bit avalanche hash).
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for item `index` of a family rooted at `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, substream: u64) -> Self {
        CounterRng {
            key: mix64(seed ^ mix64(substream.wrapping_add(GOLDEN_GAMMA))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let n = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix64(mix64(n ^ self.key).wrapping_add(self.key))
    }

    /// Uniform on the half-open interval `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box–Muller transform (cosine branch only).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }
}
