//! Portable seeded randomness.
//!
//! The generator is ChaCha8 (as implemented by `rand_chacha`). The 256-bit
//! key is the 64-bit seed in little-endian order followed by 24 zero bytes;
//! the 64-bit stream id selects an independent sequence, so samples drawn
//! from `(class << 32) | index` streams can be produced in any order.
//!
//! Derived draws:
//! - `next_f64`: `(next_u64 >> 11) * 2^-53`, uniform on `[0, 1)`.
//! - `below(n)`: rejection sampling; draws `v` until `v < 2^64 - (2^64 mod n)`
//!   and returns `v mod n`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SampleRng(ChaCha8Rng);

impl SampleRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Stream for sample `index` of class `class`.
    pub fn for_sample(seed: u64, class: usize, index: usize) -> Self {
        let class = u32::try_from(class).expect("class index fits in 32 bits");
        let index = u32::try_from(index).expect("sample index fits in 32 bits");
        Self::new(seed, (u64::from(class) << 32) | u64::from(index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < limit {
                return (v % n) as usize;
            }
        }
    }

    /// `k` distinct indices from `0..n` in draw order (partial Fisher-Yates).
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
