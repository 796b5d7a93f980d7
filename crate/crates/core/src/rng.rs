//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator (counter-based, 64-bit stream id).
//! A stream is identified by `(seed, stream_id)`; the 256-bit ChaCha key is
//! expanded from `seed` with the PCG32 expansion of `rand_core` 0.6
//! `SeedableRng::seed_from_u64`. Substreams keep the seed and derive a new
//! stream id with the SplitMix64 finalizer:
//!
//! ```text
//! child_id = splitmix64(parent_id ^ splitmix64(key + 0x9E3779B97F4A7C15))
//! ```
//!
//! Distinct ChaCha stream ids never share keystream blocks, so substreams
//! derived from different keys are disjoint.
//!
//! Transforms:
//! - uniform `f64` in `[0, 1)`: top 53 bits of `next_u64`, times `2^-53`;
//! - normal: basic Box–Muller on `(1 − u1, u2)`, both outputs used in order
//!   (cosine branch first, sine branch second);
//! - integer in `[0, n)`: Lemire's multiply-shift with rejection.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::linalg::Matrix;

/// Well-known substream keys.
pub mod keys {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DATA: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const ETF: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
    pub const COSINE: u64 = 7;
    pub const THEOREM: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent child stream; does not advance `self`.
    pub fn substream(&self, key: u64) -> RngStream {
        let id = splitmix64(self.stream ^ splitmix64(key.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        Self::with_stream(self.seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// `rows×cols` matrix of i.i.d. `N(mean, std²)` entries, row-major draw order.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
        assert!(std >= 0.0, "negative standard deviation");
        Matrix::from_fn(rows, cols, |_, _| self.normal(mean, std))
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform_range(lo, hi))
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, uniformly, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
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

/// `sample_gaussian(rng, rows, cols, mean, std)`.
pub fn sample_gaussian(rng: &mut RngStream, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
    rng.gaussian_matrix(rows, cols, mean, std)
}
