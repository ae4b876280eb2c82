//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from [`LiftRng`], which wraps
//! xoshiro256++ seeded through SplitMix64 (the reference seeding procedure of
//! the xoshiro authors). The derived quantities are defined here so that other
//! implementations can reproduce datasets and masks bit for bit:
//!
//! * uniform `f64` in `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! * uniform integer below `bound`: rejection sampling on `next_u64`, rejecting
//!   draws `>= 2^64 - (2^64 mod bound)`, then `draw % bound`
//! * standard normal: Box–Muller on `u1 = ((next_u64 >> 11) + 1) * 2^-53`
//!   (never zero) and `u2` uniform; `r = sqrt(-2 ln u1)`, the pair
//!   `(r cos 2πu2, r sin 2πu2)` is emitted cosine first
//!
//! Sub-seeds come from [`derive_seed`], which hashes the master seed together
//! with a role tag, so independent consumers never share a stream.

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sub-seed for a named role: `mix64(master ^ fnv1a64(tag))`.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    mix64(master ^ fnv1a64(tag.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct LiftRng {
    inner: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

impl LiftRng {
    pub fn new(seed: u64) -> Self {
        LiftRng {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform integer in `0..bound`. `bound` must be positive.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() needs a positive bound");
        let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % bound;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53;
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `k` distinct indices from `0..n`, via a partial Fisher–Yates shuffle.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// In-place Fisher–Yates shuffle (same draw sequence as [`Self::sample_indices`]).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        for i in 0..n.saturating_sub(1) {
            let j = i + self.below((n - i) as u64) as usize;
            items.swap(i, j);
        }
    }
}
