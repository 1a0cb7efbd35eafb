use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeded ChaCha8 stream.
///
/// ChaCha output is specified bit-for-bit, so a seed reproduces the same draws
/// on every platform. Normal variates use the ziggurat sampler of `rand_distr`.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named sub-component. Depends only on the
    /// parent seed and `stream`, never on how many draws the parent has made.
    pub fn derive(&self, stream: u64) -> Self {
        Self::new(splitmix64(
            self.seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)),
        ))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn std_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn sample_std_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.std_normal()).collect()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_draws_is_empty() {
        assert!(RngState::new(1).sample_std_normal(0).is_empty());
    }

    #[test]
    fn same_seed_same_stream() {
        let a = RngState::new(42).sample_std_normal(64);
        let b = RngState::new(42).sample_std_normal(64);
        assert_eq!(a, b);
        assert_ne!(a, RngState::new(43).sample_std_normal(64));
    }

    #[test]
    fn normal_moments_over_a_million_draws() {
        let n = 1_000_000;
        let xs = RngState::new(2024).sample_std_normal(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn derived_streams_ignore_parent_position() {
        let mut parent = RngState::new(5);
        let before = parent.derive(3).sample_std_normal(4);
        parent.sample_std_normal(100);
        assert_eq!(before, parent.derive(3).sample_std_normal(4));
        assert_ne!(before, parent.derive(4).sample_std_normal(4));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        RngState::new(9).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
