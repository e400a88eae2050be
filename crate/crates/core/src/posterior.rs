//! Implicit approximate posterior over inducing values: a Bayesian neural
//! network with Gaussian weights evaluated at trainable inducing inputs.

use ndiff::{Graph, NodeId, ParamStore, Tensor};

use crate::error::{Result, SipError};
use crate::rng::Rng;

pub const INDUCING_X: &str = "inducing.x";
pub const LOGSTD_MIN: f64 = -10.0;
pub const LOGSTD_MAX: f64 = 3.0;

/// `m` trainable input locations, stored as `[m, 1]` under [`INDUCING_X`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InducingSet {
    m: usize,
}

impl InducingSet {
    /// Picks `m` distinct training inputs uniformly at random.
    pub fn init(x_train: &Tensor, m: usize, rng: &mut Rng, store: &mut ParamStore) -> Result<Self> {
        let n = x_train.rows();
        if m == 0 || m > n {
            return Err(SipError::contract(format!(
                "cannot pick {m} inducing points from {n} inputs"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let picked = idx[..m].iter().map(|&i| x_train.get(i, 0)).collect();
        store.insert(INDUCING_X, Tensor::column(picked));
        Ok(InducingSet { m })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn locations(store: &ParamStore) -> Result<&Tensor> {
        Ok(store.value(INDUCING_X)?)
    }

    pub fn node(&self, g: &mut Graph, store: &ParamStore) -> Result<NodeId> {
        Ok(g.param(store, INDUCING_X)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitPosterior {
    widths: Vec<usize>,
    slope: f64,
}

fn name(layer: usize, part: &str) -> String {
    format!("posterior.{part}{layer}")
}

impl ImplicitPosterior {
    /// `widths` includes input and output, e.g. `[1, 50, 50, 1]`.
    pub fn new(widths: &[usize], slope: f64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(SipError::contract(format!("bad layer widths {widths:?}")));
        }
        if widths[0] != 1 || widths[widths.len() - 1] != 1 {
            return Err(SipError::contract("posterior network maps scalars to scalars"));
        }
        Ok(ImplicitPosterior {
            widths: widths.to_vec(),
            slope,
        })
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Weight means ~ N(0, 1/fan_in), bias means 0, every log-std `logstd0`.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng, logstd0: f64) -> Result<()> {
        for l in 0..self.layers() {
            let (a, b) = (self.widths[l], self.widths[l + 1]);
            store.insert(name(l, "w_mean"), rng.normal(0.0, 1.0 / (a as f64).sqrt(), &[a, b])?);
            store.insert(name(l, "w_logstd"), Tensor::full(&[a, b], logstd0));
            store.insert(name(l, "b_mean"), Tensor::zeros(&[b]));
            store.insert(name(l, "b_logstd"), Tensor::full(&[b], logstd0));
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers())
            .flat_map(|l| ["w_mean", "w_logstd", "b_mean", "b_logstd"].map(|p| name(l, p)))
            .collect()
    }

    /// `[s, M]` network outputs at the inducing inputs `xbar` (`[M, 1]`), one
    /// independent weight draw per row.
    pub fn sample_u_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rng: &mut Rng,
        xbar: NodeId,
        s: usize,
    ) -> Result<NodeId> {
        if s < 1 {
            return Err(SipError::contract("sample_u needs s >= 1"));
        }
        let m = g.value(xbar).rows();
        let mut layers = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let mut pair = Vec::with_capacity(4);
            for part in ["w", "b"] {
                let mean = g.param(store, &name(l, &format!("{part}_mean")))?;
                let ls = g.param(store, &name(l, &format!("{part}_logstd")))?;
                let ls = g.clamp(ls, LOGSTD_MIN, LOGSTD_MAX)?;
                let std = g.exp(ls)?;
                pair.push((mean, std));
            }
            layers.push(pair);
        }
        let mut rows = Vec::with_capacity(s);
        for _ in 0..s {
            let mut h = xbar;
            for (l, pair) in layers.iter().enumerate() {
                let (a, b) = (self.widths[l], self.widths[l + 1]);
                let w = self.draw(g, rng, pair[0], &[a, b])?;
                let bias = self.draw(g, rng, pair[1], &[b])?;
                h = g.matmul(h, w)?;
                h = g.broadcast_add_row(h, bias)?;
                if l + 1 < self.layers() {
                    h = g.leaky_relu(h, self.slope)?;
                }
            }
            rows.push(g.reshape(h, &[1, m])?);
        }
        Ok(g.concat(&rows, 0)?)
    }

    fn draw(&self, g: &mut Graph, rng: &mut Rng, (mean, std): (NodeId, NodeId), shape: &[usize]) -> Result<NodeId> {
        let eps = g.constant(rng.normal(0.0, 1.0, shape)?);
        let noise = g.mul(std, eps)?;
        Ok(g.add(mean, noise)?)
    }

    /// Plain-value `[s, M]` samples at the stored inducing inputs.
    pub fn sample_u(&self, store: &ParamStore, rng: &mut Rng, s: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let xbar = g.constant(InducingSet::locations(store)?.clone());
        let u = self.sample_u_node(&mut g, store, rng, xbar, s)?;
        Ok(g.value(u).clone())
    }
}
