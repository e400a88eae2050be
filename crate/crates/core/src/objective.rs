//! The α-energy objective with the symmetrized KL regularizer, and the
//! alternating training loop.

use std::path::Path;

use ndiff::{AdamConfig, Graph, NodeId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::bridge::{gp_conditional_node, predict, PredictiveMixture};
use crate::csv::{Cell, CsvWriter};
use crate::datasets::Dataset;
use crate::error::{Result, SipError};
use crate::posterior::{ImplicitPosterior, InducingSet};
use crate::prior::{empirical_moments_node, RffPrior};
use crate::ratio::{kl_estimates_node, Discriminator, StatsGradient};
use crate::rng::{Purpose, Rng};

pub const LOG_NOISE_VAR: &str = "likelihood.log_noise_var";
const LOG_2PI: f64 = 1.8378770664093453;
const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SipConfig {
    pub alpha: f64,
    pub s_posterior: usize,
    pub s_prior_moments: usize,
    pub s_predict: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub seed: u64,
    pub m_inducing: usize,
    pub rff_features: usize,
    pub posterior_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub posterior_logstd_init: f64,
    pub init_noise_var: f64,
    /// Let gradients flow through the prior-batch statistics that
    /// standardize discriminator inputs.
    pub disc_stats_gradient: bool,
}

impl Default for SipConfig {
    fn default() -> Self {
        SipConfig {
            alpha: 1.0,
            s_posterior: 50,
            s_prior_moments: 200,
            s_predict: 100,
            epochs: 1600,
            batch_size: 100,
            lr: 1e-2,
            disc_lr: 1e-3,
            seed: 0,
            m_inducing: 50,
            rff_features: 500,
            posterior_hidden: vec![50, 50],
            disc_hidden: vec![100, 100],
            leaky_slope: 0.01,
            posterior_logstd_init: -1.0,
            init_noise_var: 0.1,
            disc_stats_gradient: true,
        }
    }
}

impl SipConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SipError::Config(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        for (name, v) in [
            ("s_posterior", self.s_posterior),
            ("s_prior_moments", self.s_prior_moments),
            ("s_predict", self.s_predict),
            ("batch_size", self.batch_size),
            ("rff_features", self.rff_features),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.s_posterior < 2 {
            return bad("s_posterior must be at least 2".into());
        }
        if self.s_prior_moments < self.s_posterior {
            return bad("s_prior_moments must be at least s_posterior".into());
        }
        if self.m_inducing < 2 {
            return bad("m_inducing must be at least 2".into());
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.init_noise_var > 0.0) {
            return bad("init_noise_var must be positive".into());
        }
        if self.posterior_hidden.contains(&0) || self.disc_hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub data_term: f64,
    pub kl_qp: f64,
    pub kl_pq: f64,
    pub disc_loss: f64,
    pub noise_var: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = CsvWriter::create(
            path,
            &["epoch", "data_term", "kl_qp", "kl_pq", "disc_loss", "noise_var"],
        )?;
        for r in &self.records {
            w.cells(&[
                Cell::Int(r.epoch as u64),
                Cell::Float(r.data_term),
                Cell::Float(r.kl_qp),
                Cell::Float(r.kl_pq),
                Cell::Float(r.disc_loss),
                Cell::Float(r.noise_var),
            ])?;
        }
        w.finish()
    }
}

/// `(1/α)·Σ_i [logsumexp_s(α·log N(y_i; f_si, v_i + σ²)) − log S]·n_total/B`.
///
/// `f` is `[S, B]`, `var` an optional `[B]` node of per-point variances added
/// to the noise, `log_noise_var` a scalar node.
pub fn alpha_energy_node(
    g: &mut Graph,
    f: NodeId,
    var: Option<NodeId>,
    y: NodeId,
    log_noise_var: NodeId,
    alpha: f64,
    n_total: usize,
) -> Result<NodeId> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SipError::contract(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let shape = g.value(f).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 || g.value(y).shape() != [shape[1]] {
        return Err(SipError::contract(format!(
            "f {:?} and y {:?} do not form [S, B] and [B]",
            shape,
            g.value(y).shape()
        )));
    }
    let (s, b) = (shape[0], shape[1]);
    let noise = g.exp(log_noise_var)?;
    let tv = match var {
        Some(v) => g.add(v, noise)?,
        None => {
            let zeros = g.constant(Tensor::zeros(&[b]));
            g.add(zeros, noise)?
        }
    };
    let neg_f = g.neg(f)?;
    let resid = g.broadcast_add_row(neg_f, y)?;
    let sq = g.square(resid)?;
    let one = g.constant(Tensor::scalar(1.0));
    let inv_tv = g.div(one, tv)?;
    let quad = g.broadcast_mul_row(sq, inv_tv)?;
    let quad = g.scale(quad, -0.5)?;
    let log_tv = g.log(tv)?;
    let norm = g.scale(log_tv, -0.5)?;
    let norm = g.shift(norm, -0.5 * LOG_2PI)?;
    let ll = g.broadcast_add_row(quad, norm)?;
    let scaled = g.scale(ll, alpha)?;
    let lse = g.logsumexp_axis(scaled, 0)?;
    let per_point = g.shift(lse, -(s as f64).ln())?;
    let total = g.sum(per_point)?;
    Ok(g.scale(total, n_total as f64 / (b as f64 * alpha))?)
}

/// Plain-value α-energy term with zero component variance.
pub fn alpha_energy_term(f: &Tensor, y: &Tensor, noise_var: f64, alpha: f64, n_total: usize) -> Result<f64> {
    if !(noise_var > 0.0) {
        return Err(SipError::contract("noise variance must be positive"));
    }
    let mut g = Graph::new();
    let fnode = g.constant(f.clone());
    let ynode = g.constant(y.clone());
    let lnv = g.constant(Tensor::scalar(noise_var.ln()));
    let v = alpha_energy_node(&mut g, fnode, None, ynode, lnv, alpha, n_total)?;
    Ok(g.scalar(v))
}

/// `−(data − ½(kl_qp + kl_pq))`.
pub fn sip_loss_node(g: &mut Graph, data: NodeId, kl_qp: NodeId, kl_pq: NodeId) -> Result<NodeId> {
    let kl = g.add(kl_qp, kl_pq)?;
    let half = g.scale(kl, 0.5)?;
    let obj = g.sub(data, half)?;
    Ok(g.neg(obj)?)
}

/// Scalar values of one generator evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepValues {
    pub loss: f64,
    pub data_term: f64,
    pub kl_qp: f64,
    pub kl_pq: f64,
    pub disc_loss: f64,
}

/// All trained state of one SIP run.
#[derive(Clone, Debug)]
pub struct SipModel {
    pub config: SipConfig,
    pub prior: RffPrior,
    pub posterior: ImplicitPosterior,
    pub inducing: InducingSet,
    pub discriminator: Discriminator,
    pub store: ParamStore,
}

impl SipModel {
    /// Fresh parameters for training on the standardized inputs `x_train`.
    pub fn init(x_train: &Tensor, cfg: &SipConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let mut store = ParamStore::new();
        let prior = RffPrior::new(&mut Rng::for_purpose(seed, Purpose::PriorInit), cfg.rff_features)?;
        prior.init_params(&mut store);
        let mut widths = vec![1];
        widths.extend_from_slice(&cfg.posterior_hidden);
        widths.push(1);
        let posterior = ImplicitPosterior::new(&widths, cfg.leaky_slope)?;
        posterior.init_params(
            &mut store,
            &mut Rng::for_purpose(seed, Purpose::PosteriorInit),
            cfg.posterior_logstd_init,
        )?;
        let inducing = InducingSet::init(
            x_train,
            cfg.m_inducing,
            &mut Rng::for_purpose(seed, Purpose::InducingInit),
            &mut store,
        )?;
        store.insert(LOG_NOISE_VAR, Tensor::scalar(cfg.init_noise_var.ln()));
        let discriminator = Discriminator::new(
            cfg.m_inducing,
            &cfg.disc_hidden,
            cfg.leaky_slope,
            cfg.disc_lr,
            &mut Rng::for_purpose(seed, Purpose::DiscriminatorInit),
        )?;
        Ok(SipModel {
            config: cfg.clone(),
            prior,
            posterior,
            inducing,
            discriminator,
            store,
        })
    }

    pub fn noise_var(&self) -> Result<f64> {
        Ok(self.store.scalar(LOG_NOISE_VAR)?.exp())
    }

    /// One discriminator update followed by one generator gradient
    /// computation on the batch `(xb [B, 1], yb [B])`. Generator gradients are
    /// accumulated into `self.store` but not applied.
    pub fn step_gradients(&mut self, xb: &Tensor, yb: &Tensor, n_total: usize, rng: &mut Rng) -> Result<StepValues> {
        let cfg = &self.config;
        let (m, s) = (cfg.m_inducing, cfg.s_posterior);
        let mut g = Graph::new();
        let xbar = self.inducing.node(&mut g, &self.store)?;
        let xbn = g.constant(xb.clone());
        let joint = g.concat(&[xbar, xbn], 0)?;
        let f = self
            .prior
            .sample_functions_node(&mut g, &self.store, rng, joint, cfg.s_prior_moments)?;
        let u_q = self.posterior.sample_u_node(&mut g, &self.store, rng, xbar, s)?;
        let f_head = g.slice(f, 0, 0, s)?;
        let u_p = g.slice(f_head, 1, 0, m)?;

        let disc_loss = self.discriminator.step(g.value(u_q), g.value(u_p))?;

        let (mean, cov) = empirical_moments_node(&mut g, f)?;
        let cond = gp_conditional_node(&mut g, mean, cov, u_q)?;
        let y = g.constant(yb.clone());
        let lnv = g.param(&self.store, LOG_NOISE_VAR)?;
        let data = alpha_energy_node(&mut g, cond.mean, Some(cond.var), y, lnv, cfg.alpha, n_total)?;
        let stats = if cfg.disc_stats_gradient {
            StatsGradient::Tracked
        } else {
            StatsGradient::Detached
        };
        let (kq, kp) = kl_estimates_node(&self.discriminator, &mut g, u_q, u_p, stats)?;
        let loss = sip_loss_node(&mut g, data, kq, kp)?;
        g.backward(loss)?;
        g.accumulate_grads(&mut self.store)?;
        Ok(StepValues {
            loss: g.scalar(loss),
            data_term: g.scalar(data),
            kl_qp: g.scalar(kq),
            kl_pq: g.scalar(kp),
            disc_loss,
        })
    }

    /// Predictive mixture in standardized coordinates at `x_star` (`[N*, 1]`).
    pub fn predict(&self, x_star: &Tensor, rng: &mut Rng) -> Result<PredictiveMixture> {
        predict(
            &self.prior,
            &self.posterior,
            &self.store,
            x_star,
            self.config.s_predict,
            self.config.s_prior_moments,
            self.noise_var()?,
            rng,
        )
    }
}

fn check_divergence(epoch: usize, v: &StepValues) -> Result<()> {
    if !v.loss.is_finite() || v.loss.abs() > DIVERGENCE_LIMIT {
        return Err(SipError::Divergence {
            epoch,
            detail: format!(
                "loss {:e} (data {:e}, kl_qp {:e}, kl_pq {:e}, disc {:e})",
                v.loss, v.data_term, v.kl_qp, v.kl_pq, v.disc_loss
            ),
        });
    }
    Ok(())
}

/// Trains on a standardized dataset for `cfg.epochs` passes over shuffled
/// minibatches.
pub fn train(ds: &Dataset, cfg: &SipConfig) -> Result<(SipModel, TrainTrace)> {
    if ds.standardization.is_none() {
        return Err(SipError::contract("train expects a standardized dataset"));
    }
    let mut model = SipModel::init(&ds.x_train, cfg)?;
    let trace = train_model(&mut model, &ds.x_train, &ds.y_train)?;
    Ok((model, trace))
}

/// Runs the training loop on an initialized model.
pub fn train_model(model: &mut SipModel, x: &Tensor, y: &Tensor) -> Result<TrainTrace> {
    let cfg = model.config.clone();
    let n = y.len();
    if x.rows() != n || n == 0 {
        return Err(SipError::contract("training inputs and targets disagree in length"));
    }
    let mut noise_rng = Rng::for_purpose(cfg.seed, Purpose::TrainNoise);
    let mut shuffle_rng = Rng::for_purpose(cfg.seed, Purpose::Shuffle);
    let adam = AdamConfig::with_lr(cfg.lr);
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for chunk in order.chunks(bs) {
            let xb = Tensor::column(chunk.iter().map(|&i| x.get(i, 0)).collect());
            let yb = Tensor::from_vec(chunk.iter().map(|&i| y.data()[i]).collect());
            let v = model.step_gradients(&xb, &yb, n, &mut noise_rng)?;
            check_divergence(epoch, &v)?;
            model.store.adam_step(&adam);
            for (acc, val) in sums.iter_mut().zip([v.data_term, v.kl_qp, v.kl_pq, v.disc_loss]) {
                *acc += val;
            }
            batches += 1;
        }
        let k = batches as f64;
        trace.records.push(TraceRecord {
            epoch,
            data_term: sums[0] / k,
            kl_qp: sums[1] / k,
            kl_pq: sums[2] / k,
            disc_loss: sums[3] / k,
            noise_var: model.noise_var()?,
        });
    }
    Ok(trace)
}
