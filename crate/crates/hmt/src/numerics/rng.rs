//! Deterministic random number generation.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood; the reference
//! implementation shipped with xoshiro): a Weyl sequence over the 64-bit
//! golden-ratio increment `0x9E3779B97F4A7C15`, finalized with the
//! murmur-style mixer constants `0xBF58476D1CE4E5B9` / `0x94D049BB133111EB`.
//! State is `(seed, counter)`, so draws are counter-based: the n-th output is
//! a pure function of the seed, which makes snapshots and resume trivial and
//! platform-independent.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based SplitMix64 state. Identical seed ⇒ identical draw sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Rebuild a state captured by `seed()`/`counter()` (checkpoint resume).
    pub fn from_parts(seed: u64, counter: u64) -> Self {
        RngState { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derive an independent stream for a subcomponent. The offset scheme is
    /// fixed: sub-seed = mix(seed ^ mix(stream_tag + golden_gamma)).
    pub fn derive(seed: u64, stream_tag: u64) -> u64 {
        mix(seed ^ mix(stream_tag.wrapping_add(GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    fn next_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller (cosine branch; two draws per sample).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n) via the 128-bit multiply reduction.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below requires n > 0");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }
}
