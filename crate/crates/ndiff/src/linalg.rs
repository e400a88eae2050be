//! Cholesky factorization and triangular solves on plain tensors.
//!
//! Both routines work on row-major storage and only touch contiguous rows in
//! their inner loops.

use crate::error::{NdiffError, Result};
use crate::tensor::Tensor;

fn square_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(NdiffError::Contract(format!(
            "{op} needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    Ok(a.shape()[0])
}

/// Lower Cholesky factor `L` with `L Lᵀ = a`. Only the lower triangle of `a`
/// is read.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a, "cholesky")?;
    let src = a.data();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = (i * n, j * n);
            let dot: f64 = l[ri..ri + j]
                .iter()
                .zip(&l[rj..rj + j])
                .map(|(x, y)| x * y)
                .sum();
            let s = src[ri + j] - dot;
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(NdiffError::NotPositiveDefinite { pivot: i });
                }
                l[ri + i] = s.sqrt();
            } else {
                l[ri + j] = s / l[rj + j];
            }
        }
    }
    Tensor::new(&[n, n], l)
}

/// Solves `l x = b` (or `lᵀ x = b` when `transposed`) for lower-triangular
/// `l`. `b` may be a vector `[n]` or a matrix `[n, k]`; the result has the
/// shape of `b`.
pub fn solve_triangular(l: &Tensor, b: &Tensor, transposed: bool) -> Result<Tensor> {
    let n = square_dim(l, "solve_triangular")?;
    if b.shape().first() != Some(&n) || b.rank() > 2 {
        return Err(NdiffError::shapes("solve_triangular", l.shape(), b.shape()));
    }
    let k = b.len() / n.max(1);
    let ld = l.data();
    for i in 0..n {
        if ld[i * n + i] == 0.0 {
            return Err(NdiffError::Singular { index: i });
        }
    }
    let mut x = b.data().to_vec();
    if !transposed {
        for i in 0..n {
            let (head, tail) = x.split_at_mut(i * k);
            let xi = &mut tail[..k];
            for p in 0..i {
                let c = ld[i * n + p];
                if c != 0.0 {
                    let xp = &head[p * k..(p + 1) * k];
                    xi.iter_mut().zip(xp).for_each(|(a, b)| *a -= c * b);
                }
            }
            let d = ld[i * n + i];
            xi.iter_mut().for_each(|a| *a /= d);
        }
    } else {
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * k);
            let xi = &mut head[i * k..];
            for p in i + 1..n {
                let c = ld[p * n + i];
                if c != 0.0 {
                    let xp = &tail[(p - i - 1) * k..(p - i) * k];
                    xi.iter_mut().zip(xp).for_each(|(a, b)| *a -= c * b);
                }
            }
            let d = ld[i * n + i];
            xi.iter_mut().for_each(|a| *a /= d);
        }
    }
    Tensor::new(b.shape(), x)
}

/// `L Lᵀ` for a square `l`.
pub fn reconstruct(l: &Tensor) -> Result<Tensor> {
    l.matmul(&l.transpose()?)
}

/// `a + jitter·I`.
pub fn add_diagonal(a: &Tensor, jitter: f64) -> Result<Tensor> {
    let n = square_dim(a, "add_diagonal")?;
    let mut out = a.clone();
    for i in 0..n {
        out.data_mut()[i * n + i] += jitter;
    }
    Ok(out)
}
