//! Seeded, stream-split random numbers.
//!
//! Every consumer draws from its own ChaCha8 stream keyed by
//! `(seed, purpose)`, so changing how many samples one stage takes never shifts
//! the numbers another stage sees.

use ndiff::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Result, SipError};

/// Stream tags. The discriminant is the ChaCha stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    TrainData = 1,
    TestData = 2,
    PriorInit = 3,
    PosteriorInit = 4,
    InducingInit = 5,
    DiscriminatorInit = 6,
    TrainNoise = 7,
    Shuffle = 8,
    Predict = 9,
    MixtureDraws = 10,
    GpFit = 11,
    Figures = 12,
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            inner,
            spare_normal: None,
        }
    }

    pub fn for_purpose(seed: u64, purpose: Purpose) -> Self {
        Self::with_stream(seed, purpose as u64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw by Box–Muller; the second variate of each pair is
    /// kept for the next call.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64, shape: &[usize]) -> Result<Tensor> {
        if !(lo < hi) {
            return Err(SipError::contract(format!("uniform needs lo < hi, got [{lo}, {hi})")));
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * self.next_f64()).collect();
        Ok(Tensor::new(shape, data)?)
    }

    pub fn normal(&mut self, mean: f64, std: f64, shape: &[usize]) -> Result<Tensor> {
        if !(std >= 0.0) {
            return Err(SipError::contract(format!("normal needs std >= 0, got {std}")));
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| mean + std * self.standard_normal()).collect();
        Ok(Tensor::new(shape, data)?)
    }

    pub fn bernoulli_mask(&mut self, p: f64, shape: &[usize]) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&p) {
            return Err(SipError::contract(format!("bernoulli needs p in [0, 1], got {p}")));
        }
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| if self.next_f64() < p { 1.0 } else { 0.0 })
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}
