//! Seeded random streams.
//!
//! Every random draw in the crate comes from [`SeedRng`], a ChaCha8 stream
//! cipher keyed by a 64-bit seed and a stream id. ChaCha is counter based:
//! the output is a pure function of `(seed, stream, word counter)`, so runs
//! reproduce across machines and across re-implementations that follow the
//! same derivations:
//!
//! - key: `seed` written little-endian into the first 8 bytes of a 32-byte
//!   zero key (the `rand_chacha` `seed_from_u64` path is *not* used);
//! - stream: the ChaCha stream/nonce word, one per [`Stream`] purpose;
//! - uniform `f64` in `[0, 1)`: `(next_u64 >> 11) * 2^-53`;
//! - standard normal: Box-Muller on two uniforms, `sqrt(-2 ln(1-u1)) * cos(2π u2)`
//!   ([`SeedRng::normal_pair`] also returns the matching `sin` draw);
//! - bounded integer `[0, n)`: `(next_u64 as u128 * n) >> 64`;
//! - shuffle: Fisher-Yates from the last index down.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Independent purposes that each get their own stream for a given seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Subsample = 4,
    Data = 5,
    Probe = 6,
    MonteCarlo = 7,
    Check = 8,
}

#[derive(Debug, Clone)]
pub struct SeedRng {
    inner: ChaCha8Rng,
}

impl SeedRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream as u64)
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Two independent standard normals from one Box-Muller transform.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
