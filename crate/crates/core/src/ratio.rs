//! Classifier-based log density-ratio estimate between posterior and prior
//! inducing values, and the symmetrized KL built on it.

use ndiff::{AdamConfig, Graph, NodeId, ParamStore, Tensor};

use crate::error::{Result, SipError};
use crate::rng::Rng;

const STD_FLOOR: f64 = 1e-8;

/// MLP `[M, hidden.., 1]` producing one logit per input row. Inputs are
/// standardized column-wise by statistics of the prior batch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    widths: Vec<usize>,
    slope: f64,
    adam: AdamConfig,
    pub params: ParamStore,
}

fn wname(l: usize) -> String {
    format!("disc.w{l}")
}

fn bname(l: usize) -> String {
    format!("disc.b{l}")
}

/// Column mean and sample standard deviation (plus a small floor) of a
/// `[S, M]` node.
pub fn batch_stats_node(g: &mut Graph, u: NodeId) -> Result<(NodeId, NodeId)> {
    let s = g.value(u).rows();
    if s < 2 {
        return Err(SipError::contract("batch statistics need at least 2 rows"));
    }
    let mean = g.mean_axis(u, 0)?;
    let neg = g.neg(mean)?;
    let centered = g.broadcast_add_row(u, neg)?;
    let sq = g.square(centered)?;
    let var = g.sum_axis(sq, 0)?;
    let var = g.scale(var, 1.0 / (s - 1) as f64)?;
    let std = g.sqrt(var)?;
    let std = g.shift(std, STD_FLOOR)?;
    Ok((mean, std))
}

fn standardize_node(g: &mut Graph, u: NodeId, mean: NodeId, std: NodeId) -> Result<NodeId> {
    let neg = g.neg(mean)?;
    let centered = g.broadcast_add_row(u, neg)?;
    let one = g.constant(Tensor::scalar(1.0));
    let inv = g.div(one, std)?;
    Ok(g.broadcast_mul_row(centered, inv)?)
}

impl Discriminator {
    pub fn new(m: usize, hidden: &[usize], slope: f64, lr: f64, rng: &mut Rng) -> Result<Self> {
        if m == 0 || hidden.contains(&0) {
            return Err(SipError::contract("discriminator widths must be positive"));
        }
        let mut widths = vec![m];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut params = ParamStore::new();
        for l in 0..widths.len() - 1 {
            let (a, b) = (widths[l], widths[l + 1]);
            params.insert(wname(l), rng.normal(0.0, 1.0 / (a as f64).sqrt(), &[a, b])?);
            params.insert(bname(l), Tensor::zeros(&[b]));
        }
        Ok(Discriminator {
            widths,
            slope,
            adam: AdamConfig::with_lr(lr),
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Logits `[S]` of already-standardized inputs. With `trainable` the
    /// weights are graph parameters; otherwise they enter as constants.
    pub fn logits_node(&self, g: &mut Graph, input: NodeId, trainable: bool) -> Result<NodeId> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(SipError::contract(format!(
                "discriminator expects [S, {}], got {shape:?}",
                self.input_dim()
            )));
        }
        let layers = self.widths.len() - 1;
        let mut h = input;
        for l in 0..layers {
            let (w, b) = if trainable {
                (g.param(&self.params, &wname(l))?, g.param(&self.params, &bname(l))?)
            } else {
                (
                    g.constant(self.params.value(&wname(l))?.clone()),
                    g.constant(self.params.value(&bname(l))?.clone()),
                )
            };
            h = g.matmul(h, w)?;
            h = g.broadcast_add_row(h, b)?;
            if l + 1 < layers {
                h = g.leaky_relu(h, self.slope)?;
            }
        }
        Ok(g.reshape(h, &[shape[0]])?)
    }

    /// Logits of raw inputs standardized by `reference` (a prior batch).
    pub fn logits(&self, u: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let r = g.constant(reference.clone());
        let (mean, std) = batch_stats_node(&mut g, r)?;
        let un = g.constant(u.clone());
        let z = standardize_node(&mut g, un, mean, std)?;
        let t = self.logits_node(&mut g, z, false)?;
        Ok(g.value(t).clone())
    }

    /// One Adam step on the logistic loss with `u_q` labelled 1 and `u_p`
    /// labelled 0. Returns the loss before the step.
    pub fn step(&mut self, u_q: &Tensor, u_p: &Tensor) -> Result<f64> {
        if u_q.shape() != u_p.shape() || u_q.rank() != 2 || u_q.cols() != self.input_dim() {
            return Err(SipError::contract(format!(
                "discriminator batches {:?} and {:?} must both be [S, {}]",
                u_q.shape(),
                u_p.shape(),
                self.input_dim()
            )));
        }
        let mut g = Graph::new();
        let p = g.constant(u_p.clone());
        let q = g.constant(u_q.clone());
        let (mean, std) = batch_stats_node(&mut g, p)?;
        let zq = standardize_node(&mut g, q, mean, std)?;
        let zp = standardize_node(&mut g, p, mean, std)?;
        let tq = self.logits_node(&mut g, zq, true)?;
        let tp = self.logits_node(&mut g, zp, true)?;
        let nq = g.neg(tq)?;
        let lq = g.softplus(nq)?;
        let lq = g.mean(lq)?;
        let lp = g.softplus(tp)?;
        let lp = g.mean(lp)?;
        let loss = g.add(lq, lp)?;
        g.backward(loss)?;
        g.accumulate_grads(&mut self.params)?;
        self.params.adam_step(&self.adam);
        Ok(g.scalar(loss))
    }
}

/// Whether the prior-batch statistics used to standardize discriminator
/// inputs carry gradient in the KL estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsGradient {
    Detached,
    Tracked,
}

/// `(E_q[T], E_p[−T])` as graph nodes, differentiable through `u_q` and
/// `u_p` with the discriminator weights frozen.
pub fn kl_estimates_node(
    d: &Discriminator,
    g: &mut Graph,
    u_q: NodeId,
    u_p: NodeId,
    stats: StatsGradient,
) -> Result<(NodeId, NodeId)> {
    let p_for_stats = match stats {
        StatsGradient::Tracked => u_p,
        StatsGradient::Detached => g.constant(g.value(u_p).clone()),
    };
    let (mean, std) = batch_stats_node(g, p_for_stats)?;
    let zq = standardize_node(g, u_q, mean, std)?;
    let zp = standardize_node(g, u_p, mean, std)?;
    let tq = d.logits_node(g, zq, false)?;
    let tp = d.logits_node(g, zp, false)?;
    let kq = g.mean(tq)?;
    let tp_mean = g.mean(tp)?;
    let kp = g.neg(tp_mean)?;
    Ok((kq, kp))
}

pub fn kl_estimates(d: &Discriminator, u_q: &Tensor, u_p: &Tensor) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let q = g.constant(u_q.clone());
    let p = g.constant(u_p.clone());
    let (kq, kp) = kl_estimates_node(d, &mut g, q, p, StatsGradient::Detached)?;
    Ok((g.scalar(kq), g.scalar(kp)))
}

/// KL pair from precomputed log-ratio values on each sample set.
pub fn kl_from_logits(t_q: &[f64], t_p: &[f64]) -> Result<(f64, f64)> {
    if t_q.is_empty() || t_p.is_empty() {
        return Err(SipError::contract("kl estimates need samples"));
    }
    let kq = t_q.iter().sum::<f64>() / t_q.len() as f64;
    let kp = -t_p.iter().sum::<f64>() / t_p.len() as f64;
    Ok((kq, kp))
}
