//! Point and probabilistic scores on the original data scale.

use std::f64::consts::PI;
use std::fmt;

use ndiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::bridge::PredictiveMixture;
use crate::datasets::DatasetKind;
use crate::error::{Result, SipError};

const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactGp,
    Sip,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ExactGp => "exact_gp",
            Method::Sip => "sip",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: DatasetKind,
    pub seed: u64,
    pub method: Method,
    pub rmse: f64,
    pub nll: f64,
    pub crps: f64,
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(SipError::contract(format!("{what}: lengths {a} and {b} must match and be non-zero")));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], y: &[f64]) -> Result<f64> {
    check_len("rmse", pred.len(), y.len())?;
    let mse = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
    Ok(mse.sqrt())
}

fn log_normal(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LOG_2PI + var.ln() + (y - mean).powi(2) / var)
}

/// Mean of `−log N(y_i; mean_i, var_i)`.
pub fn nll_gaussian(mean: &[f64], var: &[f64], y: &[f64]) -> Result<f64> {
    check_len("nll_gaussian", mean.len(), y.len())?;
    check_len("nll_gaussian", var.len(), y.len())?;
    if var.iter().any(|v| !(*v > 0.0)) {
        return Err(SipError::contract("nll_gaussian needs positive variances"));
    }
    let total: f64 = (0..y.len()).map(|i| -log_normal(y[i], mean[i], var[i])).sum();
    Ok(total / y.len() as f64)
}

/// Mean over points of `−log((1/S)·Σ_s N(y_i; m_si, v_si + σ²))`.
pub fn nll_mixture(mix: &PredictiveMixture, y: &[f64]) -> Result<f64> {
    check_len("nll_mixture", mix.points(), y.len())?;
    let s = mix.components();
    let log_s = (s as f64).ln();
    let mut total = 0.0;
    let mut lls = vec![0.0; s];
    for (i, yi) in y.iter().enumerate() {
        for (k, ll) in lls.iter_mut().enumerate() {
            let v = mix.total_component_var(k, i);
            if !(v > 0.0) {
                return Err(SipError::contract("mixture component variance must be positive"));
            }
            *ll = log_normal(*yi, mix.means.get(k, i), v);
        }
        let max = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lls.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total -= lse - log_s;
    }
    Ok(total / y.len() as f64)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Closed-form CRPS of `N(mean, std²)`, averaged over points.
pub fn crps_gaussian(mean: &[f64], std: &[f64], y: &[f64]) -> Result<f64> {
    check_len("crps_gaussian", mean.len(), y.len())?;
    check_len("crps_gaussian", std.len(), y.len())?;
    if std.iter().any(|s| !(*s > 0.0)) {
        return Err(SipError::contract("crps_gaussian needs positive standard deviations"));
    }
    let inv_sqrt_pi = 1.0 / PI.sqrt();
    let total: f64 = (0..y.len())
        .map(|i| {
            let z = (y[i] - mean[i]) / std[i];
            std[i] * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - inv_sqrt_pi)
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// Sample CRPS `(1/K)Σ|f_k − y| − (1/2K²)ΣΣ|f_k − f_j|` per point from
/// `[K, N]` draws, averaged over points.
pub fn crps_samples(samples: &Tensor, y: &[f64]) -> Result<f64> {
    if samples.rank() != 2 || samples.rows() < 2 {
        return Err(SipError::contract("crps_samples needs [K >= 2, N] draws"));
    }
    check_len("crps_samples", samples.cols(), y.len())?;
    let k = samples.rows();
    let kf = k as f64;
    let mut col = vec![0.0; k];
    let mut total = 0.0;
    for (i, yi) in y.iter().enumerate() {
        for (r, c) in col.iter_mut().enumerate() {
            *c = samples.get(r, i);
        }
        let abs_err = col.iter().map(|f| (f - yi).abs()).sum::<f64>() / kf;
        col.sort_by(f64::total_cmp);
        // ΣΣ|f_k − f_j| = 2·Σ_r (2r − K − 1)·f_(r), r = 1..K
        let spread: f64 = col
            .iter()
            .enumerate()
            .map(|(r, f)| (2.0 * (r + 1) as f64 - kf - 1.0) * f)
            .sum();
        total += abs_err - spread / (kf * kf);
    }
    Ok(total / y.len() as f64)
}

/// A lower bound on Hartigan's dip statistic of the sample.
///
/// For a mode `m`, the distance from the empirical CDF `F` to distributions
/// that are convex left of `m` and concave right of it is at least half the
/// larger of two gaps: `F` minus its greatest convex minorant on `(−∞, m]`,
/// and its least concave majorant on `[m, ∞)` minus `F`. The first gap grows
/// with `m` and the second shrinks, so checking consecutive candidate modes
/// `t_a < t_b` bounds every `m` between them.
pub fn dip_lower_bound(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 4 {
        return Err(SipError::contract("dip bound needs at least 4 samples"));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let nf = n as f64;
    let (lo, hi) = (x[0], x[n - 1]);
    let steps = 200;
    let mut cands: Vec<f64> = (0..=steps).map(|i| x[i * (n - 1) / steps]).collect();
    cands.extend((0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64));
    cands.sort_by(f64::total_cmp);
    cands.dedup();

    // F(t) = (number of samples ≤ t)/n
    let count_le = |t: f64| x.partition_point(|v| *v <= t);
    let left_gap = |t: f64| -> f64 {
        let c = count_le(t);
        // lower corners (x_k, (k−1)/n) for x_k ≤ t, then the endpoint (t, F(t))
        let mut pts: Vec<(f64, f64)> = (1..=c).map(|k| (x[k - 1], (k - 1) as f64 / nf)).collect();
        pts.push((t, c as f64 / nf));
        let hull = lower_hull(&pts);
        (1..=c)
            .filter(|&k| x[k - 1] < t)
            .map(|k| k as f64 / nf - hull_eval(&hull, x[k - 1]))
            .fold(0.0, f64::max)
    };
    let right_gap = |t: f64| -> f64 {
        let c = count_le(t);
        // (t, F(t)) then upper corners (x_k, k/n) for x_k > t, reflected so
        // the lower hull gives the concave majorant
        let mut pts: Vec<(f64, f64)> = (c + 1..=n).rev().map(|k| (-x[k - 1], -(k as f64) / nf)).collect();
        pts.push((-t, -(c as f64) / nf));
        let hull = lower_hull(&pts);
        (c + 1..=n)
            .map(|k| -hull_eval(&hull, -x[k - 1]) - (k - 1) as f64 / nf)
            .fold(0.0, f64::max)
    };
    let lefts: Vec<f64> = cands.iter().map(|&t| left_gap(t)).collect();
    let rights: Vec<f64> = cands.iter().map(|&t| right_gap(t)).collect();
    // modes below the smallest or above the largest candidate
    let mut best = rights[0].min(lefts[cands.len() - 1]);
    for a in 0..cands.len() - 1 {
        best = best.min(lefts[a].max(rights[a + 1]));
    }
    Ok(best / 2.0)
}

fn lower_hull(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for &p in pts {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

fn hull_eval(hull: &[(f64, f64)], x: f64) -> f64 {
    let i = hull.partition_point(|p| p.0 < x);
    if i == 0 {
        return hull[0].1;
    }
    if i == hull.len() {
        return hull[hull.len() - 1].1;
    }
    let (a, b) = (hull[i - 1], hull[i]);
    if b.0 == a.0 {
        return a.1.min(b.1);
    }
    a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_cases() {
        let y = [1.0, -2.0, 3.0];
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
        assert!((rmse(&shifted, &y).unwrap() - 1.0).abs() < 1e-15);
        assert!(rmse(&y[..2], &y).is_err());
    }

    #[test]
    fn nll_gaussian_cases() {
        let v = nll_gaussian(&[0.0], &[1.0], &[0.0]).unwrap();
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
        let v = nll_gaussian(&[1.0], &[1.0 / (2.0 * PI)], &[1.0]).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(nll_gaussian(&[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn nll_change_of_variables() {
        let (m, v, y) = ([0.3, -0.2], [0.5, 1.5], [0.1, 0.4]);
        let (mu, sd) = (10.0, 3.0);
        let base = nll_gaussian(&m, &v, &y).unwrap();
        let om: Vec<f64> = m.iter().map(|a| a * sd + mu).collect();
        let ov: Vec<f64> = v.iter().map(|a| a * sd * sd).collect();
        let oy: Vec<f64> = y.iter().map(|a| a * sd + mu).collect();
        let orig = nll_gaussian(&om, &ov, &oy).unwrap();
        assert!((orig - (base + sd.ln())).abs() < 1e-12);
    }

    #[test]
    fn mixture_single_component_equals_gaussian() {
        let mix = PredictiveMixture::new(
            Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.2, 0.3]]).unwrap(),
            0.1,
        )
        .unwrap();
        let y = [0.0, 0.0];
        let a = nll_mixture(&mix, &y).unwrap();
        let b = nll_gaussian(&[0.5, -1.0], &[0.3, 0.4], &y).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_component_hand_value() {
        let mix = PredictiveMixture::new(
            Tensor::from_rows(&[vec![5.0], vec![-5.0]]).unwrap(),
            Tensor::zeros(&[2, 1]),
            1.0,
        )
        .unwrap();
        let got = nll_mixture(&mix, &[5.0]).unwrap();
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
        let want = -(0.5 * (phi(0.0) + phi(10.0))).ln();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.612).abs() < 1e-3);
        // moment-matched Gaussian: mean 0, variance 26
        let single = nll_gaussian(&[0.0], &[26.0], &[5.0]).unwrap();
        assert!(got < single);
    }

    #[test]
    fn duplicated_components_leave_nll_unchanged() {
        let one = PredictiveMixture::new(
            Tensor::from_rows(&[vec![1.0], vec![-2.0]]).unwrap(),
            Tensor::full(&[2, 1], 0.5),
            0.2,
        )
        .unwrap();
        let two = PredictiveMixture::new(
            Tensor::from_rows(&[vec![1.0], vec![-2.0], vec![1.0], vec![-2.0]]).unwrap(),
            Tensor::full(&[4, 1], 0.5),
            0.2,
        )
        .unwrap();
        let a = nll_mixture(&one, &[0.3]).unwrap();
        let b = nll_mixture(&two, &[0.3]).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn crps_gaussian_cases() {
        let v = crps_gaussian(&[0.0], &[1.0], &[0.0]).unwrap();
        assert!((v - 0.23370).abs() < 1e-5, "{v}");
        let a = crps_gaussian(&[0.4], &[1.3], &[1.1]).unwrap();
        let b = crps_gaussian(&[0.4 * 2.5], &[1.3 * 2.5], &[1.1 * 2.5]).unwrap();
        assert!((b - 2.5 * a).abs() < 1e-12);
        let far = crps_gaussian(&[0.0], &[1.0], &[1e4]).unwrap();
        assert!((far / 1e4 - 1.0).abs() < 1e-3);
        assert!(crps_gaussian(&[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn crps_samples_cases() {
        let exact = Tensor::full(&[5, 2], 3.0);
        assert_eq!(crps_samples(&exact, &[3.0, 3.0]).unwrap(), 0.0);
        let two = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        assert!((crps_samples(&two, &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(crps_samples(&Tensor::zeros(&[1, 1]), &[0.0]).is_err());
    }

    #[test]
    fn crps_sorted_form_matches_pairwise() {
        let draws: [f64; 6] = [0.3, -1.2, 2.2, 0.9, 0.0, -0.4];
        let y: f64 = 0.5;
        let k = draws.len() as f64;
        let mut pair = 0.0;
        for a in draws {
            for b in draws {
                pair += (a - b).abs();
            }
        }
        let want = draws.iter().map(|f| (f - y).abs()).sum::<f64>() / k - pair / (2.0 * k * k);
        let t = Tensor::new(&[6, 1], draws.to_vec()).unwrap();
        assert!((crps_samples(&t, &[y]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn dip_bound_separates_shapes() {
        let n = 2000;
        let uni: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!(dip_lower_bound(&uni).unwrap() < 0.01);
        let two: Vec<f64> = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                if i % 2 == 0 {
                    u
                } else {
                    u + 10.0
                }
            })
            .collect();
        let d = dip_lower_bound(&two).unwrap();
        assert!(d > 0.1, "{d}");
    }
}
