//! Counter-based seeded random streams.
//!
//! A stream is addressed by `(seed, index)` and backed by ChaCha8, whose
//! 64-bit stream id and word position make every draw a pure function of
//! `(seed, index, counter)`. Iteration `i` of a study always sees the same
//! numbers no matter which worker runs it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeededStream {
    pub seed: u64,
    pub index: u64,
    /// Number of 32-bit words already consumed.
    pub counter: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededStream {
    pub fn new(seed: u64, index: u64) -> Self {
        SeededStream {
            seed,
            index,
            counter: 0,
        }
    }

    /// Independent child stream keyed by `tag`. Children of different
    /// parents or different tags never share a ChaCha key/stream pair.
    pub fn derive(&self, tag: u64) -> SeededStream {
        let key = splitmix64(self.seed ^ splitmix64(self.index ^ 0xA5A5_5A5A_0F0F_F0F0))
            ^ splitmix64(tag.wrapping_add(0x1234_5678_9ABC_DEF1))
            ^ self.counter.rotate_left(17);
        SeededStream::new(splitmix64(key), tag)
    }

    /// A generator positioned at this stream's current counter.
    pub fn rng(&self) -> StreamRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(self.index);
        inner.set_word_pos(self.counter as u128);
        StreamRng {
            inner,
            seed: self.seed,
            index: self.index,
        }
    }
}

/// Live generator for a [`SeededStream`].
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
    seed: u64,
    index: u64,
}

impl StreamRng {
    /// Snapshot of the position reached so far.
    pub fn position(&self) -> SeededStream {
        SeededStream {
            seed: self.seed,
            index: self.index,
            counter: self.inner.get_word_pos() as u64,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + sd * z
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for StreamRng {
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
