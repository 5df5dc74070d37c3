//! Counter-based pseudo-random numbers for reproducible parallel runs.
//!
//! The generator is SplitMix64 viewed as a counter-based function: output
//! `i` of stream `key` is `mix64(key + (i+1)·GAMMA)` where `mix64` is the
//! SplitMix64 finalizer (Vigna). Any output is thus a pure function of
//! `(key, i)`, so replicate streams can be created and consumed in any
//! order, on any thread, with identical results.
//!
//! Stream split: replicate `r` of master seed `m` uses
//! `key = mix64(m ^ mix64(r + SPLIT_SALT))`. This is the documented
//! splitter referenced by ensemble output formats.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLIT_SALT: u64 = 0xA076_1D64_78BD_642F;

/// SplitMix64 finalizer: bijective avalanche mix of a 64-bit word.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child stream key for replicate `stream` of `master`.
#[inline]
pub fn child_key(master: u64, stream: u64) -> u64 {
    mix64(master ^ mix64(stream.wrapping_add(SPLIT_SALT)))
}

/// Counter-based SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    /// Stream for replicate `stream` of `master`, starting at counter 0.
    pub fn for_stream(master: u64, stream: u64) -> Self {
        Self::new(child_key(master, stream))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exponential variate with the given rate, via inversion.
    #[inline]
    pub fn exp(&mut self, rate: f64) -> f64 {
        // 1 - U lies in (0, 1], so ln never sees zero.
        -(1.0 - self.next_f64()).ln() / rate
    }

    /// Standard normal via Marsaglia's polar method.
    pub fn standard_normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        // Rejection from the top to avoid modulo bias.
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }
}
