//! Counter-based splittable random number streams.
//!
//! Every randomized operation in the crate takes an [`RngStream`] value and
//! derives child streams by index. A stream is a pure value: the draw
//! sequence depends only on `(seed, stream_id)`, never on thread scheduling,
//! so Monte Carlo experiments reproduce bit-identically under any level of
//! parallelism.

use serde::{Deserialize, Serialize};

/// 64-bit finalizer with full avalanche (murmur3 fmix64).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 33)).wrapping_mul(0xff51afd7ed558ccd);
    z = (z ^ (z >> 33)).wrapping_mul(0xc4ceb9fe1a85ec53);
    z ^ (z >> 33)
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Identifier of an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Child stream for task `index`. Pure function of `(seed, stream_id, index)`;
    /// distinct indices yield statistically independent streams.
    pub fn derive_substream(self, index: u64) -> Self {
        let mut h = mix64(self.seed ^ GOLDEN_GAMMA);
        h = mix64(h ^ self.stream_id.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        h = mix64(h ^ index.wrapping_mul(0x94d0_49bb_1331_11eb));
        RngStream {
            seed: self.seed,
            stream_id: h,
        }
    }

    /// Materialize the stream into a generator positioned at its start.
    pub fn rng(self) -> Prng {
        let state = mix64(self.seed ^ GOLDEN_GAMMA) ^ mix64(self.stream_id.wrapping_add(GOLDEN_GAMMA));
        let gamma = mix_gamma(mix64(state ^ self.stream_id).wrapping_add(GOLDEN_GAMMA));
        Prng { state, gamma }
    }
}

/// Free-function form of [`RngStream::derive_substream`].
pub fn derive_substream(parent: RngStream, index: u64) -> RngStream {
    parent.derive_substream(index)
}

/// Ensure the additive constant is odd and has enough bit transitions
/// (Steele et al.'s SplittableRandom gamma fixup).
fn mix_gamma(z: u64) -> u64 {
    let mut g = mix64(z) | 1;
    if (g ^ (g >> 1)).count_ones() < 24 {
        g ^= 0xaaaa_aaaa_aaaa_aaaa;
    }
    g
}

/// Counter-based generator: output i is `mix64(state + (i+1) * gamma)`.
#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
    gamma: u64,
}

impl Prng {
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(self.gamma);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform integer in [0, n) via Lemire's method.
    pub fn uniform_range(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.uniform_range((i + 1) as u64) as usize;
            xs.swap(i, j);
        }
    }
}

impl rand_core::RngCore for Prng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        Prng::next_u64(self)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        let mut chunks = dest.chunks_exact_mut(8);
        for chunk in &mut chunks {
            chunk.copy_from_slice(&self.next_u64().to_le_bytes());
        }
        let rem = chunks.into_remainder();
        if !rem.is_empty() {
            let bytes = self.next_u64().to_le_bytes();
            rem.copy_from_slice(&bytes[..rem.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_same_sequence() {
        let s = RngStream::new(7, 0).derive_substream(0);
        let mut a = s.rng();
        let mut b = s.rng();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_indices_distinct_sequences() {
        let parent = RngStream::new(7, 0);
        let mut a = parent.derive_substream(0).rng();
        let mut b = parent.derive_substream(1).rng();
        let same = (0..100).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_mean_law_of_large_numbers() {
        for seed in [0u64, 7, 42, 123456789] {
            let mut rng = RngStream::new(seed, 0).rng();
            let mean = (0..10_000).map(|_| rng.next_f64()).sum::<f64>() / 10_000.0;
            assert!((0.45..=0.55).contains(&mean), "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn uniform_range_unbiased_small_n() {
        let mut rng = RngStream::new(3, 9).rng();
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[rng.uniform_range(5) as usize] += 1;
        }
        for c in counts {
            // 3 binomial sds around 10_000
            assert!((c as f64 - 10_000.0).abs() < 3.0 * (50_000.0f64 * 0.2 * 0.8).sqrt());
        }
    }

    #[test]
    fn shuffle_is_deterministic() {
        let mut a: Vec<u32> = (0..20).collect();
        let mut b = a.clone();
        RngStream::new(1, 2).rng().shuffle(&mut a);
        RngStream::new(1, 2).rng().shuffle(&mut b);
        assert_eq!(a, b);
        assert_ne!(a, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn substream_is_pure() {
        let p = RngStream::new(5, 11);
        assert_eq!(p.derive_substream(3), p.derive_substream(3));
        assert_ne!(p.derive_substream(3), p.derive_substream(4));
        // child keeps the seed so results remain attributable to one run
        assert_eq!(p.derive_substream(3).seed, 5);
    }
}
