//! Gaussian conditionals from inducing values built on empirical prior
//! moments, and the resulting predictive mixture.

use std::path::Path;

use ndiff::{linalg, Graph, NodeId, ParamStore, Tensor};

use crate::csv::{Cell, CsvWriter};
use crate::datasets::Standardization;
use crate::error::{Result, SipError};
use crate::posterior::{ImplicitPosterior, InducingSet};
use crate::prior::{empirical_moments_node, RffPrior};
use crate::rng::Rng;

const JITTER_RELATIVE: f64 = 1e-6;
const JITTER_RETRIES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGaussian {
    /// `[S, N*]`
    pub mean: Tensor,
    /// `[N*]`, shared by every sample
    pub var: Tensor,
    pub jitter_used: f64,
}

/// Graph nodes of a conditional: means `[S, N*]`, variances `[N*]`.
#[derive(Clone, Copy, Debug)]
pub struct ConditionalNodes {
    pub mean: NodeId,
    pub var: NodeId,
    pub jitter_used: f64,
}

/// Smallest jitter on the schedule `1e-6·tr(K)/M · 10^k`, `k ≤ 3`, that makes
/// `kuu` factorizable.
pub fn choose_jitter(kuu: &Tensor) -> Result<f64> {
    let m = kuu.rows();
    let trace: f64 = kuu.diag()?.iter().sum();
    let mut jitter = JITTER_RELATIVE * trace / m as f64;
    if !(jitter.is_finite() && jitter > 0.0) {
        return Err(SipError::Conditioning { jitter });
    }
    for attempt in 0..=JITTER_RETRIES {
        if linalg::cholesky(&linalg::add_diagonal(kuu, jitter)?).is_ok() {
            return Ok(jitter);
        }
        if attempt < JITTER_RETRIES {
            jitter *= 10.0;
        }
    }
    Err(SipError::Conditioning { jitter })
}

/// Conditions the joint prior over `[inducing; targets]` on each row of
/// `u` (`[S, M]`), with the leading `M` entries of `mean`/`cov` belonging to
/// the inducing inputs.
pub fn gp_conditional_node(
    g: &mut Graph,
    mean: NodeId,
    cov: NodeId,
    u: NodeId,
) -> Result<ConditionalNodes> {
    let total = g.value(mean).len();
    let u_shape = g.value(u).shape().to_vec();
    if u_shape.len() != 2 {
        return Err(SipError::contract(format!("u must be [S, M], got {u_shape:?}")));
    }
    let m = u_shape[1];
    if g.value(cov).shape() != [total, total] || m == 0 || m >= total {
        return Err(SipError::contract(format!(
            "moments over {total} inputs do not fit {m} inducing values plus targets"
        )));
    }

    let top = g.slice(cov, 0, 0, m)?;
    let kuu = g.slice(top, 1, 0, m)?;
    let kuf = g.slice(top, 1, m, total)?;
    let bottom = g.slice(cov, 0, m, total)?;
    let kff = g.slice(bottom, 1, m, total)?;

    let jitter = choose_jitter(g.value(kuu))?;
    let eye = g.constant(Tensor::eye(m).map(|v| v * jitter));
    let kuu = g.add(kuu, eye)?;
    let l = g.cholesky(kuu)?;
    let a = g.solve_triangular(l, kuf, false)?;

    let m_u = g.slice(mean, 0, 0, m)?;
    let m_f = g.slice(mean, 0, m, total)?;
    let neg_mu = g.neg(m_u)?;
    let du = g.broadcast_add_row(u, neg_mu)?;
    let du_t = g.transpose(du)?;
    let c = g.solve_triangular(l, du_t, false)?;
    let c_t = g.transpose(c)?;
    let shift = g.matmul(c_t, a)?;
    let cond_mean = g.broadcast_add_row(shift, m_f)?;

    let prior_var = g.diag(kff)?;
    let a2 = g.square(a)?;
    let explained = g.sum_axis(a2, 0)?;
    let var = g.sub(prior_var, explained)?;
    let var = g.clamp(var, 0.0, f64::INFINITY)?;
    Ok(ConditionalNodes {
        mean: cond_mean,
        var,
        jitter_used: jitter,
    })
}

pub fn gp_conditional(prior_mean: &Tensor, prior_cov: &Tensor, u: &Tensor) -> Result<ConditionalGaussian> {
    let mut g = Graph::new();
    let mean = g.constant(prior_mean.clone());
    let cov = g.constant(prior_cov.clone());
    let un = g.constant(u.clone());
    let c = gp_conditional_node(&mut g, mean, cov, un)?;
    Ok(ConditionalGaussian {
        mean: g.value(c.mean).clone(),
        var: g.value(c.var).clone(),
        jitter_used: c.jitter_used,
    })
}

/// Uniform mixture of `S` Gaussians per target input.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveMixture {
    /// `[S, N*]`
    pub means: Tensor,
    /// `[S, N*]`, excluding `noise_var`
    pub vars: Tensor,
    pub noise_var: f64,
}

impl PredictiveMixture {
    pub fn new(means: Tensor, vars: Tensor, noise_var: f64) -> Result<Self> {
        if means.rank() != 2 || means.shape() != vars.shape() || means.rows() == 0 {
            return Err(SipError::contract(format!(
                "mixture means {:?} and vars {:?} must be matching [S >= 1, N]",
                means.shape(),
                vars.shape()
            )));
        }
        if !(noise_var >= 0.0) || vars.data().iter().any(|v| !(*v >= 0.0)) {
            return Err(SipError::contract("mixture variances must be non-negative"));
        }
        Ok(PredictiveMixture {
            means,
            vars,
            noise_var,
        })
    }

    pub fn components(&self) -> usize {
        self.means.rows()
    }

    pub fn points(&self) -> usize {
        self.means.cols()
    }

    /// Component variance including likelihood noise.
    pub fn total_component_var(&self, s: usize, i: usize) -> f64 {
        self.vars.get(s, i) + self.noise_var
    }

    /// Mixture mean per target input.
    pub fn mean(&self) -> Vec<f64> {
        let s = self.components() as f64;
        (0..self.points())
            .map(|i| (0..self.components()).map(|k| self.means.get(k, i)).sum::<f64>() / s)
            .collect()
    }

    /// Mixture standard deviation per target input, noise included.
    pub fn std(&self) -> Vec<f64> {
        let s = self.components() as f64;
        let mean = self.mean();
        (0..self.points())
            .map(|i| {
                let second = (0..self.components())
                    .map(|k| self.total_component_var(k, i) + (self.means.get(k, i) - mean[i]).powi(2))
                    .sum::<f64>();
                (second / s).sqrt()
            })
            .collect()
    }

    /// Maps a standardized-target mixture back to original units.
    pub fn destandardize(&self, st: &Standardization) -> PredictiveMixture {
        let scale2 = st.y_std * st.y_std;
        PredictiveMixture {
            means: self.means.map(|v| st.y_inverse(v)),
            vars: self.vars.map(|v| v * scale2),
            noise_var: self.noise_var * scale2,
        }
    }

    /// Ancestral draws `[draws, N*]`: a uniform component, then its Gaussian.
    pub fn sample(&self, rng: &mut Rng, draws: usize) -> Result<Tensor> {
        if draws < 1 {
            return Err(SipError::contract("sample_mixture needs draws >= 1"));
        }
        let (s, n) = (self.components(), self.points());
        let mut out = Vec::with_capacity(draws * n);
        for _ in 0..draws {
            for i in 0..n {
                let k = rng.below(s);
                let sd = self.total_component_var(k, i).sqrt();
                out.push(self.means.get(k, i) + sd * rng.standard_normal());
            }
        }
        Ok(Tensor::new(&[draws, n], out)?)
    }
}

pub fn sample_mixture(mix: &PredictiveMixture, rng: &mut Rng, draws: usize) -> Result<Tensor> {
    mix.sample(rng, draws)
}

/// Predictive mixture at `x_star` (`[N*, 1]`) from `s` posterior draws of the
/// inducing values and `s_prior` fresh prior functions for the moments.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    prior: &RffPrior,
    post: &ImplicitPosterior,
    store: &ParamStore,
    x_star: &Tensor,
    s: usize,
    s_prior: usize,
    noise_var: f64,
    rng: &mut Rng,
) -> Result<PredictiveMixture> {
    let mut g = Graph::new();
    let xbar = InducingSet::locations(store)?.clone();
    let xs = g.constant(xbar.clone());
    let joint = g.constant(Tensor::column(
        xbar.data().iter().chain(x_star.data()).copied().collect(),
    ));
    let f = prior.sample_functions_node(&mut g, store, rng, joint, s_prior)?;
    let (mean, cov) = empirical_moments_node(&mut g, f)?;
    let u = post.sample_u_node(&mut g, store, rng, xs, s)?;
    let c = gp_conditional_node(&mut g, mean, cov, u)?;
    let means = g.value(c.mean).clone();
    let var = g.value(c.var);
    let mut vars = Tensor::zeros(means.shape());
    for k in 0..s {
        for (i, v) in var.data().iter().enumerate() {
            vars.set(k, i, *v);
        }
    }
    PredictiveMixture::new(means, vars, noise_var)
}

/// Writes draws `[K, N]` at inputs `x` as `x,sample_id,f`.
pub fn dump_predictive_samples(x: &[f64], samples: &Tensor, path: &Path) -> Result<()> {
    if samples.rank() != 2 || samples.cols() != x.len() {
        return Err(SipError::contract("samples must be [draws, len(x)]"));
    }
    let mut w = CsvWriter::create(path, &["x", "sample_id", "f"])?;
    for (i, xi) in x.iter().enumerate() {
        for k in 0..samples.rows() {
            w.cells(&[Cell::Float(*xi), Cell::Int(k as u64), Cell::Float(samples.get(k, i))])?;
        }
    }
    w.finish()
}
