//! Seedable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed. Stream 0 of a
//! key is the root stream; [`RngStream::substream`] selects stream `id + 1` of
//! the same key, so sub-streams are independent of each other and of the root
//! and do not depend on the order in which they are consumed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream `id` derived from this stream's seed.
    pub fn substream(&self, id: u64) -> RngStream {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(id.wrapping_add(1));
        RngStream {
            seed: self.seed,
            inner,
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform01(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Bernoulli draw: `p <= 0` never fires, `p >= 1` always fires.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform01() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            assert_eq!(a.bernoulli(0.3), b.bernoulli(0.3));
        }
    }

    #[test]
    fn substreams_do_not_depend_on_consumption_order() {
        let root = RngStream::new(7);
        let mut s1 = root.substream(1);
        let mut s2 = root.substream(2);
        let first: Vec<f64> = (0..5).map(|_| s2.normal()).collect();
        let _ = s1.normal();
        let mut s2_again = root.substream(2);
        let again: Vec<f64> = (0..5).map(|_| s2_again.normal()).collect();
        assert_eq!(first, again);
        assert_ne!(root.substream(1).normal(), root.substream(2).normal());
    }

    #[test]
    fn bernoulli_extremes() {
        let mut r = RngStream::new(1);
        for _ in 0..1000 {
            assert!(r.bernoulli(1.0));
            assert!(!r.bernoulli(0.0));
        }
    }
}
