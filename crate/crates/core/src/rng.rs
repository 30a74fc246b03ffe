//! Seedable, splittable random streams.
//!
//! Every random draw in the toolkit goes through [`Stream`], a ChaCha8
//! keystream addressed by `(seed, stream_id)`. Derived quantities use fixed,
//! documented algorithms on top of the raw 64-bit words so that a second
//! implementation fed the same ChaCha8 words reproduces the same labels:
//!
//! * `uniform()`: top 53 bits of one word, scaled by 2^-53, in `[0, 1)`.
//! * `below(n)`: Lemire's multiply-shift with rejection on the low half.
//! * `normal()`: Box-Muller on two `uniform()` draws, cosine branch only.
//! * `shuffle`: Fisher-Yates from the last index down.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Well-known stream ids, kept apart so that adding draws to one consumer
/// never perturbs another.
pub mod streams {
    pub const NOISE_SELECT: u64 = 1;
    pub const NOISE_REPLACE: u64 = 2;
    pub const NOISE_CLASS_CONDITIONAL: u64 = 3;
    pub const INIT: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const DATA: u64 = 20;
    pub const BOOTSTRAP: u64 = 30;
}

#[derive(Clone, Debug)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { inner }
    }

    /// Child stream for a sub-task, e.g. replicate `index` of a bootstrap.
    /// The child key mixes the parent seed with the index, so children are
    /// independent of how many words the parent has consumed.
    pub fn derive(seed: u64, stream_id: u64, index: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(index.wrapping_add(1))), stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn below_usize(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below_usize(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, uniformly, via a partial
    /// Fisher-Yates over the identity permutation. Returned in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below_usize(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map({
            let mut s = Stream::new(7, 1);
            move |_| s.next_u64()
        }).collect();
        let b: Vec<u64> = (0..4).map({
            let mut s = Stream::new(7, 1);
            move |_| s.next_u64()
        }).collect();
        let c: Vec<u64> = (0..4).map({
            let mut s = Stream::new(7, 2);
            move |_| s.next_u64()
        }).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn below_is_in_range_and_roughly_uniform() {
        let mut s = Stream::new(1, 0);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[s.below_usize(5)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "{counts:?}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(3, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn sample_indices_distinct() {
        let mut s = Stream::new(9, 0);
        let mut idx = s.sample_indices(100, 40);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 40);
        assert!(idx.iter().all(|&i| i < 100));
    }
}
