//! Counter-based pseudorandom numbers.
//!
//! Every random draw in the crate (synthetic weights, atomic-order
//! permutations, test instances) comes from this generator so the streams
//! can be reproduced bit-for-bit in any language:
//!
//! ```text
//! GAMMA  = 0x9E3779B97F4A7C15
//! draw(seed, k) = mix(seed + (k + 1) * GAMMA)        (wrapping u64 arithmetic)
//! mix(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!         z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!         z ^ (z >> 31)
//! ```
//!
//! This is the SplitMix64 output sequence for state `seed`, addressed by
//! counter `k` instead of being stepped.
//!
//! Uniform reals use the top 53 bits: `(draw >> 11) * 2^-53` in `[0, 1)`.
//! Bounded integers in `[0, n)` use the multiply-high reduction
//! `(draw as u128 * n as u128) >> 64`.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `k`-th output of the stream keyed by `seed`.
pub fn draw(seed: u64, k: u64) -> u64 {
    mix64(seed.wrapping_add(k.wrapping_add(1).wrapping_mul(GAMMA)))
}

/// Derives an independent stream key, e.g. one per tensor or per output element.
pub fn substream(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(GAMMA)))
}

/// Sequential reader over a counter stream.
#[derive(Debug, Clone)]
pub struct Stream {
    seed: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = draw(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-1, 1)`.
    pub fn next_signed(&mut self) -> f64 {
        2.0 * self.next_unit() - 1.0
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn signed_vec(&mut self, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| scale * self.next_signed()).collect()
    }
}

/// Fisher–Yates permutation of `0..n` keyed by `seed`.
///
/// For `i = n-1 down to 1`, swap `i` with `j = below(i + 1)` drawn from the
/// stream in order.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = Stream::new(seed);
    for i in (1..n).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}
