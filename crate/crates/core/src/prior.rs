//! GP prior realized as a random-Fourier-feature network.

use std::path::Path;

use ndiff::{Graph, NodeId, ParamStore, Tensor};

use crate::csv::{Cell, CsvWriter};
use crate::error::{Result, SipError};
use crate::rng::Rng;

pub const LOG_LENGTHSCALE: &str = "prior.log_lengthscale";
pub const LOG_AMPLITUDE: &str = "prior.log_amplitude";

/// Features: `f(x) = a·√(2/D)·Σ_d w_d cos(x·ω_d/ℓ + b_d)` with frozen `ω`, `b`
/// and fresh outer weights `w ~ N(0, I)` per function draw.
#[derive(Clone, Debug)]
pub struct RffPrior {
    omega: Tensor,
    phase: Tensor,
}

impl RffPrior {
    pub fn new(rng: &mut Rng, features: usize) -> Result<Self> {
        if features == 0 {
            return Err(SipError::contract("RFF prior needs at least one feature"));
        }
        let omega = rng.normal(0.0, 1.0, &[1, features])?;
        let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI, &[features])?;
        Ok(RffPrior { omega, phase })
    }

    pub fn features(&self) -> usize {
        self.phase.len()
    }

    pub fn omega(&self) -> &Tensor {
        &self.omega
    }

    /// Registers `log ℓ = 0` and `log a = 0`.
    pub fn init_params(&self, store: &mut ParamStore) {
        store.insert(LOG_LENGTHSCALE, Tensor::scalar(0.0));
        store.insert(LOG_AMPLITUDE, Tensor::scalar(0.0));
    }

    pub fn lengthscale(store: &ParamStore) -> Result<f64> {
        Ok(store.scalar(LOG_LENGTHSCALE)?.exp())
    }

    pub fn amplitude(store: &ParamStore) -> Result<f64> {
        Ok(store.scalar(LOG_AMPLITUDE)?.exp())
    }

    /// Differentiable `[s, N]` function values at `x` (a graph node of shape
    /// `[N, 1]`), drawing the outer weights from `rng`.
    pub fn sample_functions_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rng: &mut Rng,
        x: NodeId,
        s: usize,
    ) -> Result<NodeId> {
        if s < 1 {
            return Err(SipError::contract("sample_functions needs s >= 1"));
        }
        let d = self.features();
        let w = g.constant(rng.normal(0.0, 1.0, &[s, d])?);
        let omega = g.constant(self.omega.clone());
        let phase = g.constant(self.phase.clone());
        let log_l = g.param(store, LOG_LENGTHSCALE)?;
        let log_a = g.param(store, LOG_AMPLITUDE)?;

        let xw = g.matmul(x, omega)?;
        let neg_log_l = g.neg(log_l)?;
        let inv_l = g.exp(neg_log_l)?;
        let arg = g.mul(xw, inv_l)?;
        let arg = g.broadcast_add_row(arg, phase)?;
        let feats = g.cos(arg)?;
        let feats_t = g.transpose(feats)?;
        let f = g.matmul(w, feats_t)?;
        let a = g.exp(log_a)?;
        let f = g.mul(f, a)?;
        Ok(g.scale(f, (2.0 / d as f64).sqrt())?)
    }

    /// Plain-value version of [`RffPrior::sample_functions_node`].
    pub fn sample_functions(
        &self,
        store: &ParamStore,
        rng: &mut Rng,
        x: &Tensor,
        s: usize,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let f = self.sample_functions_node(&mut g, store, rng, xn, s)?;
        Ok(g.value(f).clone())
    }

    /// Writes `samples` function draws on `x` as `sample_id,x,f`.
    pub fn dump_prior_samples(
        &self,
        store: &ParamStore,
        rng: &mut Rng,
        x: &[f64],
        samples: usize,
        path: &Path,
    ) -> Result<()> {
        let f = self.sample_functions(store, rng, &Tensor::column(x.to_vec()), samples)?;
        let mut w = CsvWriter::create(path, &["sample_id", "x", "f"])?;
        for s in 0..samples {
            for (i, xi) in x.iter().enumerate() {
                w.cells(&[Cell::Int(s as u64), Cell::Float(*xi), Cell::Float(f.get(s, i))])?;
            }
        }
        w.finish()
    }
}

/// Column means `[N]` and unbiased covariance `[N, N]` of `[S, N]` samples.
pub fn empirical_moments_node(g: &mut Graph, samples: NodeId) -> Result<(NodeId, NodeId)> {
    let shape = g.value(samples).shape().to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(SipError::contract(format!(
            "empirical moments need [S >= 2, N] samples, got {shape:?}"
        )));
    }
    let mean = g.mean_axis(samples, 0)?;
    let neg = g.neg(mean)?;
    let centered = g.broadcast_add_row(samples, neg)?;
    let ct = g.transpose(centered)?;
    let cov = g.matmul(ct, centered)?;
    let cov = g.scale(cov, 1.0 / (shape[0] - 1) as f64)?;
    Ok((mean, cov))
}

pub fn empirical_moments(samples: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let s = g.constant(samples.clone());
    let (m, c) = empirical_moments_node(&mut g, s)?;
    Ok((g.value(m).clone(), g.value(c).clone()))
}

/// `a²·exp(−(x−x′)²/(2ℓ²))`.
pub fn rbf_kernel(x1: &[f64], x2: &[f64], lengthscale: f64, amplitude: f64) -> Tensor {
    let mut k = Tensor::zeros(&[x1.len(), x2.len()]);
    for (i, a) in x1.iter().enumerate() {
        for (j, b) in x2.iter().enumerate() {
            let r = (a - b) / lengthscale;
            k.set(i, j, amplitude * amplitude * (-0.5 * r * r).exp());
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64) -> (RffPrior, ParamStore) {
        let prior = RffPrior::new(&mut Rng::new(seed), 500).unwrap();
        let mut store = ParamStore::new();
        prior.init_params(&mut store);
        (prior, store)
    }

    #[test]
    fn zero_samples_rejected() {
        let (prior, store) = setup(0);
        assert!(prior
            .sample_functions(&store, &mut Rng::new(1), &Tensor::column(vec![0.0]), 0)
            .is_err());
    }

    #[test]
    fn shape_and_frozen_features() {
        let (prior, store) = setup(0);
        let f = prior
            .sample_functions(&store, &mut Rng::new(1), &Tensor::column(vec![0.0, 1.0, 2.0]), 7)
            .unwrap();
        assert_eq!(f.shape(), &[7, 3]);
        assert!(prior.phase.data().iter().all(|b| (0.0..2.0 * std::f64::consts::PI).contains(b)));
    }

    #[test]
    fn tiny_amplitude_gives_zero_functions() {
        let (prior, mut store) = setup(0);
        store.set_value(LOG_AMPLITUDE, Tensor::scalar(-800.0)).unwrap();
        let f = prior
            .sample_functions(&store, &mut Rng::new(1), &Tensor::column(vec![-1.0, 0.5]), 10)
            .unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pointwise_variance_is_amplitude_squared() {
        let (prior, store) = setup(3);
        let f = prior
            .sample_functions(&store, &mut Rng::new(4), &Tensor::column(vec![0.7]), 100_000)
            .unwrap();
        let (_, cov) = empirical_moments(&f).unwrap();
        assert!((cov.item().unwrap() - 1.0).abs() < 0.03, "variance {}", cov.item().unwrap());
    }

    #[test]
    fn covariance_matches_rbf() {
        let (prior, store) = setup(5);
        let h = 0.8;
        let f = prior
            .sample_functions(&store, &mut Rng::new(6), &Tensor::column(vec![0.0, h]), 100_000)
            .unwrap();
        let (_, cov) = empirical_moments(&f).unwrap();
        let want = (-h * h / 2.0f64).exp();
        assert!((cov.get(0, 1) - want).abs() < 0.05, "{} vs {want}", cov.get(0, 1));
    }

    #[test]
    fn constant_rows_have_zero_covariance() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let (m, c) = empirical_moments(&s).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0]);
        assert!(c.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_sample_hand_value() {
        let s = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let (m, c) = empirical_moments(&s).unwrap();
        assert_eq!(m.item().unwrap(), 1.0);
        assert_eq!(c.item().unwrap(), 2.0);
    }

    #[test]
    fn one_sample_rejected() {
        assert!(empirical_moments(&Tensor::from_rows(&[vec![0.0]]).unwrap()).is_err());
    }

    #[test]
    fn dump_writes_all_rows() {
        let (prior, store) = setup(0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.csv");
        prior
            .dump_prior_samples(&store, &mut Rng::new(2), &[0.0, 1.0, 2.0], 4, &path)
            .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 12);
        assert!(text.starts_with("sample_id,x,f\n0,"));
    }
}
