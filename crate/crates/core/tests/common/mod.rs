#![allow(dead_code)]

/// Dense row-major inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let d = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let pivot = m[c].clone();
                m[r].iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// log|det a| by LU with partial pivoting.
pub fn log_abs_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        acc += m[c][c].abs().ln();
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    acc
}

pub fn matvec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn rbf(a: f64, b: f64, lengthscale: f64, signal_var: f64) -> f64 {
    signal_var * (-0.5 * ((a - b) / lengthscale).powi(2)).exp()
}

pub fn kernel(xs: &[f64], zs: &[f64], lengthscale: f64, signal_var: f64) -> Vec<Vec<f64>> {
    xs.iter()
        .map(|a| zs.iter().map(|b| rbf(*a, *b, lengthscale, signal_var)).collect())
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Inputs with pairwise gaps of at least `gap`, starting near `start`.
pub fn spaced(start: f64, gaps: &[f64], gap: f64) -> Vec<f64> {
    let mut x = vec![start];
    for g in gaps {
        let last = *x.last().unwrap();
        x.push(last + gap + g);
    }
    x
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
