//! Splittable counter-based random streams.
//!
//! Reproducibility here is a hard contract: every random draw in the system
//! must be a pure function of (master seed, stream labels, position), so that
//! per-image work can run on any thread layout and still produce identical
//! bits. A tiny SplitMix64 generator gives exactly that with no state shared
//! between streams; library generators tie draw order to iteration order,
//! which is what we need to avoid.

/// SplitMix64 finalizer. Full-avalanche mixing of a 64-bit value.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Derives a child seed from a parent seed and a label. Used to split one
/// master seed into independent streams (per image, per epoch, per purpose).
#[inline]
pub fn split(seed: u64, label: u64) -> u64 {
    mix64(seed ^ label.wrapping_mul(GOLDEN_GAMMA).wrapping_add(GOLDEN_GAMMA))
}

/// Deterministic sequential generator over one stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    state: u64,
}

impl StreamRng {
    /// Opens the stream identified by `seed` and the given labels.
    /// Labels are mixed in order, so `(a, b)` and `(b, a)` differ.
    pub fn new(seed: u64, labels: &[u64]) -> Self {
        let mut s = mix64(seed ^ GOLDEN_GAMMA);
        for &l in labels {
            s = split(s, l);
        }
        StreamRng { state: s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 24 bits of precision (exact in f32).
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in the open interval (0, 1). Never returns 0.0 or 1.0.
    #[inline]
    pub fn next_f32_open(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32 + 0.5) * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    #[inline]
    pub fn next_bool(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }

    /// Standard normal via Box-Muller on two uniform draws.
    pub fn next_gaussian(&mut self) -> f32 {
        let u1 = self.next_f32_open() as f64;
        let u2 = self.next_f32_open() as f64;
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }

    /// Uniform in [-limit, limit].
    #[inline]
    pub fn next_symmetric(&mut self, limit: f32) -> f32 {
        (self.next_f32() * 2.0 - 1.0) * limit
    }
}

/// Seeded Fisher-Yates permutation of 0..n.
pub fn permutation(seed: u64, labels: &[u64], n: usize) -> Vec<usize> {
    let mut rng = StreamRng::new(seed, labels);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.next_below(i + 1);
        perm.swap(i, j);
    }
    perm
}
