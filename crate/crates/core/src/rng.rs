//! Seedable random streams.
//!
//! Each stream is a ChaCha8 generator keyed by the run seed and positioned on
//! its own 64-bit stream id, so the sequence depends only on
//! `(seed, stream_id)` and never on scheduling. Child streams are derived by
//! hashing a tag into the parent id.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::math;

/// Stream ids for the fixed purposes a run draws randomness for.
pub mod purpose {
    pub const PARTITION: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const COMMS_PROBS: u64 = 3;
    pub const PROXY_SPLIT: u64 = 5;
    pub const SYNTHETIC_TRAIN: u64 = 6;
    pub const SYNTHETIC_TEST: u64 = 7;
    pub const CLIENT_DATA: u64 = 8;
}

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl core::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("RngStream")
            .field("seed", &self.seed)
            .field("stream_id", &self.stream_id)
            .finish_non_exhaustive()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream at the start of its sequence, identified by this
    /// stream's id and `tag`. Independent of how much of `self` was consumed.
    pub fn child(&self, tag: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)));
        RngStream::new(self.seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in `0..n` (Lemire's method). `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Standard normal via the Marsaglia polar method (second variate
    /// discarded so the stream stays stateless between calls).
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * math::sqrt(-2.0 * math::ln(s) / s);
            }
        }
    }

    /// Gamma(shape, 1) variate.
    ///
    /// Marsaglia–Tsang squeeze/rejection for `shape >= 1`; smaller shapes
    /// draw Gamma(shape + 1) and multiply by `U^(1/shape)`.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::invalid(alloc::format!(
                "gamma shape must be positive and finite, got {shape}"
            )));
        }
        if shape < 1.0 {
            let g = self.gamma_ge1(shape + 1.0);
            let u = self.uniform_open0();
            return Ok(g * libm::pow(u, 1.0 / shape));
        }
        Ok(self.gamma_ge1(shape))
    }

    fn gamma_ge1(&mut self, shape: f64) -> f64 {
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / math::sqrt(9.0 * d);
        loop {
            let (x, v) = loop {
                let x = self.normal();
                let v = 1.0 + c * x;
                if v > 0.0 {
                    break (x, v * v * v);
                }
            };
            let u = self.uniform_open0();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return d * v;
            }
            if math::ln(u) < 0.5 * x2 + d * (1.0 - v + math::ln(v)) {
                return d * v;
            }
        }
    }

    /// Fisher–Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Dirichlet(alpha · 1) sample of dimension `k` from normalized gamma
    /// variates.
    pub fn dirichlet_symmetric(&mut self, alpha: f64, k: usize) -> Result<Vec<f64>> {
        let mut draws = Vec::with_capacity(k);
        for _ in 0..k {
            draws.push(self.gamma(alpha)?);
        }
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) {
            return Err(Error::overflow(
                "dirichlet normalization (all gamma draws were zero)",
            ));
        }
        Ok(draws.into_iter().map(|g| g / total).collect())
    }
}
