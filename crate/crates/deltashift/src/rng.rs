//! Deterministic random number generation.
//!
//! Everything random in this crate flows through one SplitMix64 core so that
//! results are reproducible byte-for-byte across runs and platforms and do not
//! depend on external crate versions. Two access patterns are provided:
//!
//! - [`SplitMix64`], a sequential generator for suite synthesis and sampling;
//! - [`element_uniform`], a counter-based stream keyed by `(seed, tensor name,
//!   element index)` used for DARE drop masks, so the decision for one element
//!   can be recomputed in isolation without materializing a mask.

/// SplitMix64 output mixer. Full-period, passes BigCrush as a stream.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// FNV-1a over a byte string; used to fold tensor names into stream keys.
#[inline]
pub fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in name.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Key for a per-tensor counter stream.
#[inline]
pub fn stream_key(seed: u64, name: &str) -> u64 {
    mix64(seed ^ hash_name(name).wrapping_mul(GOLDEN_GAMMA))
}

/// Uniform f64 in `[0, 1)` for element `index` of the stream `key`.
///
/// Pure function of its arguments: evaluating elements out of order, twice, or
/// in parallel yields identical values.
#[inline]
pub fn element_uniform(key: u64, index: u64) -> f64 {
    let h = mix64(key.wrapping_add(index.wrapping_mul(GOLDEN_GAMMA)));
    // Top 53 bits -> [0, 1) with full f64 resolution.
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    #[must_use]
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive an independent child generator; `tag` distinguishes siblings.
    #[must_use]
    pub fn child(&self, tag: u64) -> Self {
        Self::new(mix64(self.state ^ tag.wrapping_mul(GOLDEN_GAMMA) ^ 0x5851_F42D_4C95_7F2D))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform f64 in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `0..bound` via rejection-free multiply-shift (bias < 2^-64).
    #[inline]
    pub fn next_below(&mut self, bound: u64) -> u64 {
        ((u128::from(self.next_u64()) * u128::from(bound)) >> 64) as u64
    }

    /// Standard normal via Box–Muller (one value per call; no caching, so the
    /// stream position is a pure function of the call count).
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// First `k` elements of a seeded Fisher–Yates shuffle of `0..n`:
    /// a uniform sample of `k` distinct indices, in sampled order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
