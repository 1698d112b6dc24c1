//! Seeded, platform-independent random streams.
//!
//! Plans and simulations must reproduce bit-for-bit across machines and
//! across reimplementations in other languages, so the generator is fixed
//! here rather than delegated to a crate whose algorithm may change between
//! releases.
//!
//! A stream is identified by `(seed, stream_id)`:
//!
//! 1. `base = SplitMix64(seed).next()`
//! 2. `init = SplitMix64(base ^ mix64(stream_id + 0x9E3779B97F4A7C15)).next()`
//!    (replaced by `0x9E3779B97F4A7C15` if it is zero)
//! 3. outputs come from xorshift64* started at `init`:
//!    `x ^= x >> 12; x ^= x << 25; x ^= x >> 27; out = x * 0x2545F4914F6CDD1D`
//!
//! `mix64` is the SplitMix64 finalizer
//! (`z = (z ^ z>>30) * 0xBF58476D1CE4E5B9; z = (z ^ z>>27) * 0x94D049BB133111EB; z ^ z>>31`).
//! Bounded integers use rejection (`threshold = 2^64 mod bound`, reject draws
//! below it, return `draw mod bound`); uniform reals use the top 53 bits.

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const XORSHIFT_MULT: u64 = 0x2545_F491_4F6C_DD1D;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }
}

/// Identifies one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub stream_id: u64,
}

impl GeneratorSpec {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Same seed, different stream. Used for per-trial streams.
    pub fn with_stream(self, stream_id: u64) -> Self {
        Self { stream_id, ..self }
    }

    pub fn stream(&self) -> Xorshift64Star {
        let base = SplitMix64::new(self.seed).next_u64();
        let init = SplitMix64::new(base ^ mix64(self.stream_id.wrapping_add(GOLDEN))).next_u64();
        Xorshift64Star::from_state(init)
    }
}

/// xorshift64* (Vigna 2016).
#[derive(Debug, Clone)]
pub struct Xorshift64Star {
    state: u64,
}

impl Xorshift64Star {
    pub fn from_state(state: u64) -> Self {
        Self {
            state: if state == 0 { GOLDEN } else { state },
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(XORSHIFT_MULT)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, bound)` without modulo bias. `bound` must be nonzero.
    #[inline]
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below(0)");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Bernoulli trial with success probability `p`.
    #[inline]
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
