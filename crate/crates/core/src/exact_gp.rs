//! Exact GP regression with an RBF plus white-noise kernel.

use std::path::Path;

use ndiff::{linalg, AdamConfig, Graph, NodeId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::csv::CsvWriter;
use crate::error::{Result, SipError};
use crate::rng::Rng;

pub const LOG_LENGTHSCALE: &str = "gp.log_lengthscale";
pub const LOG_SIGNAL_VAR: &str = "gp.log_signal_var";
pub const LOG_NOISE_VAR: &str = "gp.log_noise_var";
const LOG_2PI: f64 = 1.8378770664093453;
const NOISE_FLOOR: f64 = 1e-6;
const JITTER_RETRIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub log_lengthscale: f64,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl GpHyper {
    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }
    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }
    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(LOG_LENGTHSCALE, Tensor::scalar(self.log_lengthscale));
        s.insert(LOG_SIGNAL_VAR, Tensor::scalar(self.log_signal_var));
        s.insert(LOG_NOISE_VAR, Tensor::scalar(self.log_noise_var));
        s
    }

    fn from_store(s: &ParamStore) -> Result<Self> {
        Ok(GpHyper {
            log_lengthscale: s.scalar(LOG_LENGTHSCALE)?,
            log_signal_var: s.scalar(LOG_SIGNAL_VAR)?,
            log_noise_var: s.scalar(LOG_NOISE_VAR)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpFitConfig {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    /// Hyperparameters are fitted on a random subset of at most this many
    /// training points; prediction conditions on all of them.
    pub fit_points: usize,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        GpFitConfig {
            restarts: 3,
            steps: 2000,
            lr: 1e-2,
            fit_points: 200,
        }
    }
}

fn sq_dists(a: &[f64], b: &[f64]) -> Tensor {
    let mut d = Tensor::zeros(&[a.len(), b.len()]);
    for (i, x) in a.iter().enumerate() {
        for (j, z) in b.iter().enumerate() {
            d.set(i, j, (x - z) * (x - z));
        }
    }
    d
}

fn rbf(d2: &Tensor, h: &GpHyper) -> Tensor {
    let (sv, inv) = (h.signal_var(), 0.5 / (h.lengthscale() * h.lengthscale()));
    d2.map(|v| sv * (-v * inv).exp())
}

/// Jitter needed to factor `k`: zero when it is already positive definite,
/// otherwise `1e-6·tr(K)/N · 10^k` for the first `k ≤ 3` that works.
fn factor_with_jitter(k: &Tensor) -> Result<(Tensor, f64)> {
    if let Ok(l) = linalg::cholesky(k) {
        return Ok((l, 0.0));
    }
    let n = k.rows();
    let mut jitter = 1e-6 * k.diag()?.iter().sum::<f64>() / n as f64;
    for attempt in 0..=JITTER_RETRIES {
        if let Ok(l) = linalg::cholesky(&linalg::add_diagonal(k, jitter)?) {
            return Ok((l, jitter));
        }
        if attempt < JITTER_RETRIES {
            jitter *= 10.0;
        }
    }
    Err(SipError::Conditioning { jitter })
}

/// Log marginal likelihood of `y` (`[N]`) at inputs `x` as a graph node,
/// differentiable in the three log-hyperparameters held by `store`.
pub fn log_marginal_likelihood_node(g: &mut Graph, store: &ParamStore, x: &[f64], y: &[f64]) -> Result<NodeId> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(SipError::contract("log marginal likelihood needs matching non-empty x and y"));
    }
    let h = GpHyper::from_store(store)?;
    let d2 = sq_dists(x, x);
    let k_value = linalg::add_diagonal(&rbf(&d2, &h), h.noise_var())?;
    let (_, jitter) = factor_with_jitter(&k_value)?;

    let log_l = g.param(store, LOG_LENGTHSCALE)?;
    let log_sv = g.param(store, LOG_SIGNAL_VAR)?;
    let log_nv = g.param(store, LOG_NOISE_VAR)?;
    let d2n = g.constant(d2);
    let m2 = g.scale(log_l, -2.0)?;
    let inv_l2 = g.exp(m2)?;
    let arg = g.mul(d2n, inv_l2)?;
    let arg = g.scale(arg, -0.5)?;
    let e = g.exp(arg)?;
    let sv = g.exp(log_sv)?;
    let k = g.mul(e, sv)?;
    let nv = g.exp(log_nv)?;
    let nv = g.shift(nv, jitter)?;
    let eye = g.constant(Tensor::eye(n));
    let noise = g.mul(eye, nv)?;
    let k = g.add(k, noise)?;
    let l = g.cholesky(k)?;
    let yn = g.constant(Tensor::from_vec(y.to_vec()));
    let alpha = g.solve_triangular(l, yn, false)?;
    let a2 = g.square(alpha)?;
    let quad = g.sum(a2)?;
    let quad = g.scale(quad, -0.5)?;
    let d = g.diag(l)?;
    let logd = g.log(d)?;
    let logdet = g.sum(logd)?;
    let lml = g.sub(quad, logdet)?;
    Ok(g.shift(lml, -0.5 * n as f64 * LOG_2PI)?)
}

pub fn log_marginal_likelihood(h: &GpHyper, x: &[f64], y: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let root = log_marginal_likelihood_node(&mut g, &h.store(), x, y)?;
    Ok(g.scalar(root))
}

/// A GP conditioned on training data.
#[derive(Clone, Debug)]
pub struct GpModel {
    pub hyper: GpHyper,
    x: Vec<f64>,
    chol: Tensor,
    alpha: Tensor,
    jitter: f64,
}

/// Result of [`GpModel::fit`].
#[derive(Clone, Debug)]
pub struct GpFit {
    pub model: GpModel,
    /// Log marginal likelihood on the fitting subset before each Adam step
    /// of the winning restart, plus the final value.
    pub trace: Vec<f64>,
}

impl GpModel {
    /// Caches the Cholesky factor of `K + σ²I` and `(K + σ²I)⁻¹y`.
    pub fn condition(hyper: GpHyper, x: &[f64], y: &[f64]) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(SipError::contract("GP conditioning needs matching non-empty x and y"));
        }
        let k = linalg::add_diagonal(&rbf(&sq_dists(x, x), &hyper), hyper.noise_var())?;
        let (chol, jitter) = factor_with_jitter(&k)?;
        let tmp = linalg::solve_triangular(&chol, &Tensor::from_vec(y.to_vec()), false)?;
        let alpha = linalg::solve_triangular(&chol, &tmp, true)?;
        Ok(GpModel {
            hyper,
            x: x.to_vec(),
            chol,
            alpha,
            jitter,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Maximizes the log marginal likelihood with Adam from `restarts`
    /// log-uniform initializations in `[−2, 1]³`, then conditions on all data.
    pub fn fit(x: &[f64], y: &[f64], cfg: &GpFitConfig, rng: &mut Rng) -> Result<GpFit> {
        if cfg.restarts == 0 {
            return Err(SipError::Config("GP fit needs at least one restart".into()));
        }
        if x.is_empty() || x.len() != y.len() {
            return Err(SipError::contract("GP fit needs matching non-empty x and y"));
        }
        let (fx, fy) = if x.len() > cfg.fit_points {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(cfg.fit_points);
            idx.sort_unstable();
            (idx.iter().map(|&i| x[i]).collect(), idx.iter().map(|&i| y[i]).collect())
        } else {
            (x.to_vec(), y.to_vec())
        };
        let adam = AdamConfig::with_lr(cfg.lr);
        let mut best: Option<(f64, GpHyper, Vec<f64>)> = None;
        let mut failures = Vec::new();
        for r in 0..cfg.restarts {
            let init = rng.uniform(-2.0, 1.0, &[3])?;
            let h = GpHyper {
                log_lengthscale: init.data()[0],
                log_signal_var: init.data()[1],
                log_noise_var: init.data()[2].max(NOISE_FLOOR.ln()),
            };
            match Self::optimize(h, &fx, &fy, cfg.steps, &adam) {
                Ok((lml, h, trace)) => {
                    if best.as_ref().is_none_or(|b| lml > b.0) {
                        best = Some((lml, h, trace));
                    }
                }
                Err(e) => failures.push(format!("restart {r}: {e}")),
            }
        }
        let Some((_, hyper, trace)) = best else {
            return Err(SipError::Fitting(failures.join("; ")));
        };
        Ok(GpFit {
            model: GpModel::condition(hyper, x, y)?,
            trace,
        })
    }

    fn optimize(h: GpHyper, x: &[f64], y: &[f64], steps: usize, adam: &AdamConfig) -> Result<(f64, GpHyper, Vec<f64>)> {
        let mut store = h.store();
        let mut trace = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            let mut g = Graph::new();
            let lml = log_marginal_likelihood_node(&mut g, &store, x, y)?;
            let value = g.scalar(lml);
            if !value.is_finite() {
                return Err(SipError::Fitting(format!("non-finite marginal likelihood {value}")));
            }
            trace.push(value);
            let neg = g.neg(lml)?;
            g.backward(neg)?;
            g.accumulate_grads(&mut store)?;
            store.adam_step(adam);
            let lnv = store.scalar(LOG_NOISE_VAR)?;
            if lnv < NOISE_FLOOR.ln() {
                store.set_value(LOG_NOISE_VAR, Tensor::scalar(NOISE_FLOOR.ln()))?;
            }
        }
        let h = GpHyper::from_store(&store)?;
        let last = log_marginal_likelihood(&h, x, y)?;
        if !last.is_finite() {
            return Err(SipError::Fitting(format!("non-finite marginal likelihood {last}")));
        }
        trace.push(last);
        Ok((last, h, trace))
    }

    /// Predictive mean and variance of `y` (noise included) at `x_star`.
    pub fn posterior_predict(&self, x_star: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let ks = rbf(&sq_dists(&self.x, x_star), &self.hyper);
        let mean = ks.transpose()?.matmul(&self.alpha.reshape(&[self.x.len(), 1])?)?;
        let v = linalg::solve_triangular(&self.chol, &ks, false)?;
        let prior = self.hyper.signal_var() + self.hyper.noise_var();
        let mut var = vec![prior; x_star.len()];
        let vd = v.data();
        let m = x_star.len();
        for row in vd.chunks(m) {
            for (acc, a) in var.iter_mut().zip(row) {
                *acc -= a * a;
            }
        }
        let floor = self.hyper.noise_var();
        Ok((mean.into_data(), var.into_iter().map(|v| v.max(floor)).collect()))
    }
}

/// Writes `x,mean,std` rows.
pub fn dump_gp_predictive(x: &[f64], mean: &[f64], std: &[f64], path: &Path) -> Result<()> {
    if mean.len() != x.len() || std.len() != x.len() {
        return Err(SipError::contract("predictive columns differ in length"));
    }
    let mut w = CsvWriter::create(path, &["x", "mean", "std"])?;
    for i in 0..x.len() {
        w.row(&[x[i], mean[i], std[i]])?;
    }
    w.finish()
}
