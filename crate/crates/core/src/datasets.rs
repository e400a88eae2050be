//! The two synthetic regression problems and their standardization.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::csv::CsvWriter;
use crate::error::{Result, SipError};
use crate::rng::{Purpose, Rng};

/// Points per split.
pub const DEFAULT_SIZE: usize = 1000;
pub const X_LOW: f64 = -4.0;
pub const X_HIGH: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Bimodal,
    Heteroscedastic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Bimodal => "bimodal",
            DatasetKind::Heteroscedastic => "heteroscedastic",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = SipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bimodal" => Ok(DatasetKind::Bimodal),
            "heteroscedastic" => Ok(DatasetKind::Heteroscedastic),
            other => Err(SipError::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Affine map between original and standardized coordinates, fitted on the
/// training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: f64,
    pub x_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Standardization {
    pub fn x_forward(&self, x: f64) -> f64 {
        (x - self.x_mean) / self.x_std
    }
    pub fn x_inverse(&self, x: f64) -> f64 {
        x * self.x_std + self.x_mean
    }
    pub fn y_forward(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }
    pub fn y_inverse(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }
}

/// Train and test splits. `x_*` are columns `[n, 1]`, `y_*` are vectors `[n]`.
///
/// When `standardization` is set the tensors are in standardized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub seed: u64,
    pub x_train: Tensor,
    pub y_train: Tensor,
    pub x_test: Tensor,
    pub y_test: Tensor,
    pub standardization: Option<Standardization>,
}

/// Conditional means of the two bimodal branches at `x`.
pub fn bimodal_branch_means(x: f64) -> (f64, f64) {
    (10.0 * (x - 0.5).cos(), 10.0 * (x - 0.5).sin())
}

/// Conditional mean and standard deviation of the heteroscedastic target.
pub fn heteroscedastic_moments(x: f64) -> (f64, f64) {
    (7.0 * x.sin() + 10.0, 2.0 * x.sin().abs())
}

/// One bimodal split: inputs, targets, and the 0/1 cosine-branch indicator.
pub fn sample_bimodal(rng: &mut Rng, n: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if n < 2 {
        return Err(SipError::contract(format!("need at least 2 points, got {n}")));
    }
    let x = rng.uniform(X_LOW, X_HIGH, &[n])?.into_data();
    let branch = rng.bernoulli_mask(0.5, &[n])?.into_data();
    let eps = rng.normal(0.0, 1.0, &[n])?;
    let y = x
        .iter()
        .zip(&branch)
        .zip(eps.data())
        .map(|((&xi, &b), &e)| {
            let (c, s) = bimodal_branch_means(xi);
            if b == 1.0 {
                c + e
            } else {
                s + e
            }
        })
        .collect();
    Ok((x, y, branch))
}

/// One heteroscedastic split: `y = 7 sin x + ε sin x + 10`, `ε ~ N(0, 2²)`.
pub fn sample_heteroscedastic(rng: &mut Rng, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 2 {
        return Err(SipError::contract(format!("need at least 2 points, got {n}")));
    }
    let x = rng.uniform(X_LOW, X_HIGH, &[n])?.into_data();
    let eps = rng.normal(0.0, 2.0, &[n])?;
    let y = x
        .iter()
        .zip(eps.data())
        .map(|(&xi, &e)| 7.0 * xi.sin() + e * xi.sin() + 10.0)
        .collect();
    Ok((x, y))
}

fn split(kind: DatasetKind, rng: &mut Rng, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    match kind {
        DatasetKind::Bimodal => sample_bimodal(rng, n).map(|(x, y, _)| (x, y)),
        DatasetKind::Heteroscedastic => sample_heteroscedastic(rng, n),
    }
}

/// Train and test splits of `n` points each, drawn from disjoint streams of
/// `seed`.
pub fn generate(kind: DatasetKind, seed: u64, n: usize) -> Result<Dataset> {
    let (xtr, ytr) = split(kind, &mut Rng::for_purpose(seed, Purpose::TrainData), n)?;
    let (xte, yte) = split(kind, &mut Rng::for_purpose(seed, Purpose::TestData), n)?;
    Ok(Dataset {
        kind,
        seed,
        x_train: Tensor::column(xtr),
        y_train: Tensor::from_vec(ytr),
        x_test: Tensor::column(xte),
        y_test: Tensor::from_vec(yte),
        standardization: None,
    })
}

pub fn generate_bimodal(seed: u64, n: usize) -> Result<Dataset> {
    generate(DatasetKind::Bimodal, seed, n)
}

pub fn generate_heteroscedastic(seed: u64, n: usize) -> Result<Dataset> {
    generate(DatasetKind::Heteroscedastic, seed, n)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Dataset {
    pub fn n_train(&self) -> usize {
        self.y_train.len()
    }

    /// Maps both splits into training-split standardized coordinates
    /// (population standard deviation).
    pub fn standardize(&self) -> Result<Dataset> {
        if self.standardization.is_some() {
            return Err(SipError::contract("dataset is already standardized"));
        }
        let (x_mean, x_std) = mean_std(self.x_train.data());
        let (y_mean, y_std) = mean_std(self.y_train.data());
        if !(x_std > 0.0 && x_std.is_finite()) || !(y_std > 0.0 && y_std.is_finite()) {
            return Err(SipError::DegenerateData(format!(
                "training std x={x_std}, y={y_std}"
            )));
        }
        let st = Standardization {
            x_mean,
            x_std,
            y_mean,
            y_std,
        };
        Ok(Dataset {
            kind: self.kind,
            seed: self.seed,
            x_train: self.x_train.map(|v| st.x_forward(v)),
            y_train: self.y_train.map(|v| st.y_forward(v)),
            x_test: self.x_test.map(|v| st.x_forward(v)),
            y_test: self.y_test.map(|v| st.y_forward(v)),
            standardization: Some(st),
        })
    }

    /// Inverse of [`Dataset::standardize`].
    pub fn destandardize(&self) -> Result<Dataset> {
        let st = self
            .standardization
            .ok_or_else(|| SipError::contract("dataset is not standardized"))?;
        Ok(Dataset {
            kind: self.kind,
            seed: self.seed,
            x_train: self.x_train.map(|v| st.x_inverse(v)),
            y_train: self.y_train.map(|v| st.y_inverse(v)),
            x_test: self.x_test.map(|v| st.x_inverse(v)),
            y_test: self.y_test.map(|v| st.y_inverse(v)),
            standardization: None,
        })
    }

    /// Training split in original coordinates as `x,y` CSV.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let original = match self.standardization {
            Some(_) => self.destandardize()?,
            None => self.clone(),
        };
        let mut w = CsvWriter::create(path, &["x", "y"])?;
        for (x, y) in original.x_train.data().iter().zip(original.y_train.data()) {
            w.row(&[*x, *y])?;
        }
        w.finish()
    }
}

/// Evenly spaced grid over `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}
