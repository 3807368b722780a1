use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Seeded random stream backed by a counter-based ChaCha generator.
///
/// Streams derived from the same seed with different ids or tags share no
/// state: ChaCha's stream id selects an independent keystream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Stream for a named purpose, e.g. `"vae-init"` or `"eval-noise"`.
    pub fn derive(seed: u64, tag: &str) -> Self {
        Self::with_stream(seed, fnv1a(tag.as_bytes()))
    }

    /// Child stream of this one's seed; independent of `self`'s position.
    pub fn fork(&self, tag: &str) -> Self {
        let mut bytes = self.stream.to_le_bytes().to_vec();
        bytes.extend_from_slice(tag.as_bytes());
        Self::with_stream(self.seed, fnv1a(&bytes))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), self.normals(n)).expect("length matches shape")
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// I.i.d. standard normal tensor.
pub fn gaussian_draw(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    rng.gaussian(shape)
}

// Stable across platforms and toolchains, unlike std's hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = gaussian_draw(&mut RngStream::new(7), &[3, 4]);
        let b = gaussian_draw(&mut RngStream::new(7), &[3, 4]);
        assert_eq!(a, b);
        let c = gaussian_draw(&mut RngStream::new(8), &[3, 4]);
        assert_ne!(a, c);
    }

    #[test]
    fn moments_of_a_million_draws() {
        let t = gaussian_draw(&mut RngStream::new(1), &[1_000_000]);
        let mean = t.mean();
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((0.98..=1.02).contains(&var), "var {var}");
    }

    #[test]
    fn derived_streams_are_uncorrelated() {
        let n = 100_000;
        let a = RngStream::with_stream(42, 1).normals(n);
        let b = RngStream::with_stream(42, 2).normals(n);
        let corr = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(corr.abs() < 0.02, "corr {corr}");
        let c = RngStream::derive(42, "alpha").normals(10);
        let d = RngStream::derive(42, "beta").normals(10);
        assert_ne!(c, d);
    }

    #[test]
    fn fork_ignores_parent_position() {
        let mut parent = RngStream::new(3);
        let early = parent.fork("child").normals(4);
        parent.normals(100);
        assert_eq!(early, parent.fork("child").normals(4));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = RngStream::new(5).permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
