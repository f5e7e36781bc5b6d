//! Counter-based random streams.
//!
//! Draw `i` of a stream is `splitmix64(key + (i + 1) * GOLDEN)`, where the key
//! is derived from the seed and any number of `derive` tags. Because every
//! draw is a pure function of (key, counter), two engines that derive the
//! same stream see identical numbers regardless of how many other draws
//! happened elsewhere. Normals use the Box-Muller transform on pairs of
//! 53-bit uniforms.

use super::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    key: u64,
    counter: u64,
    spare: Option<u64>,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "splitmix64-counter/box-muller";

    pub fn new(seed: u64) -> Self {
        Self { seed, key: mix64(seed ^ 0x5DEE_CE66_D1CE_4E5B), counter: 0, spare: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `tag`. Deriving does not
    /// advance the parent.
    pub fn derive(&self, tag: u64) -> Self {
        Self { seed: self.seed, key: mix64(self.key ^ mix64(tag.wrapping_add(GOLDEN))), counter: 0, spare: None }
    }

    /// Convenience for deriving along a path of tags.
    pub fn derive_path(&self, tags: &[u64]) -> Self {
        tags.iter().fold(self.clone(), |r, &t| r.derive(t))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-64 * n, irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(bits) = self.spare.take() {
            return f64::from_bits(bits);
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some((r * theta.sin()).to_bits());
        r * theta.cos()
    }
}

/// I.i.d. standard normal tensor.
pub fn gaussian(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}
