//! Deterministic, splittable pseudo-random streams.
//!
//! Every random draw in the crate comes from a SplitMix64 stream whose seed
//! is derived from a root seed and a tag via [`derive_seed`]. The derivation
//! hierarchy (root → component → item) is fixed, so any consumer — including
//! non-Rust reimplementations — can reproduce the exact byte streams:
//!
//! ```text
//! next_u64:  state += 0x9E3779B97F4A7C15; return mix64(state)
//! mix64(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!            z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!            return z ^ (z >> 31)
//! derive_seed(seed, tag) = mix64(seed ^ mix64(tag + 0x9E3779B97F4A7C15))
//! next_f64:  (next_u64 >> 11) * 2^-53                  — uniform in [0, 1)
//! normal:    Box-Muller, two u64 draws per sample:
//!            u1 = 1 - next_f64 (in (0,1]), u2 = next_f64
//!            return sqrt(-2 ln u1) * cos(2 pi u2)
//! below(n):  (next_u64 * n) >> 64 using 128-bit product
//! shuffle:   Fisher-Yates from the top index down, j = below(i + 1)
//! ```

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(GOLDEN)))
}

/// Stream tags for the fixed seed-derivation hierarchy.
pub mod tags {
    /// Weight initialization of one layer.
    pub fn layer_weights(layer: usize) -> u64 {
        (1 << 40) | layer as u64
    }
    /// Input-sequence stream of one dataset sample.
    pub const DATA_INPUT: u64 = 2 << 40;
    /// Additive-noise stream of one dataset sample.
    pub const DATA_NOISE: u64 = 3 << 40;
    /// Label balancing / phase stream for one label index.
    pub fn data_label(label: usize) -> u64 {
        (4 << 40) | label as u64
    }
    /// Training-set shuffle for one (zero-based) global epoch.
    pub fn shuffle_epoch(epoch: usize) -> u64 {
        (5 << 40) | epoch as u64
    }
    /// One sweep point: lambda index, warmup index, repetition.
    pub fn sweep_point(lambda_idx: usize, warmup_idx: usize, rep: usize) -> u64 {
        (6 << 40) | ((lambda_idx as u64) << 28) | ((warmup_idx as u64) << 14) | rep as u64
    }
    /// Teacher-network weights inside a generated dataset.
    pub const TEACHER: u64 = 7 << 40;
    /// Per-item stream below a component tag.
    pub fn item(idx: usize) -> u64 {
        (8 << 40) | idx as u64
    }
}

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Child stream for `tag`, leaving this stream untouched.
    pub fn split(&self, tag: u64) -> SplitMix64 {
        SplitMix64::new(derive_seed(self.state, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1), 53 mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; consumes exactly two u64 draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n) via the 128-bit multiply-shift reduction.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derive_separates_tags() {
        let s = derive_seed(7, tags::layer_weights(0));
        let t = derive_seed(7, tags::layer_weights(1));
        assert_ne!(s, t);
    }

    #[test]
    fn f64_in_unit_interval() {
        let mut r = SplitMix64::new(3);
        for _ in 0..1000 {
            let v = r.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut r = SplitMix64::new(11);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = SplitMix64::new(5);
        let mut xs: Vec<usize> = (0..50).collect();
        r.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
