//! Thin QR factorization via Householder reflections.

use log::warn;

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Relative threshold below which a diagonal entry of R is treated as zero.
pub const RANK_TOL: f64 = 1e-12;

/// `X = U R` with `U` (m x n) having orthonormal columns and `R` (n x n)
/// upper triangular with a non-negative diagonal.
#[derive(Debug, Clone)]
pub struct ThinQr {
    pub u: Matrix,
    pub r: Matrix,
}

impl ThinQr {
    /// Number of diagonal entries of R below `RANK_TOL * max |R_ii|`.
    pub fn deficient_rank(&self) -> usize {
        let n = self.r.cols();
        let max = (0..n).map(|i| self.r.get(i, i).abs()).fold(0.0, f64::max);
        (0..n)
            .filter(|&i| self.r.get(i, i).abs() <= RANK_TOL * max)
            .count()
    }
}

pub fn thin_qr(x: &Matrix) -> Result<ThinQr> {
    let (m, n) = (x.rows(), x.cols());
    if m < n {
        return Err(Error::ShortCalibration { rows: m, cols: n });
    }

    let mut a = x.clone();
    // Householder vectors v_k (length m - k) with H_k = I - beta_k v_k v_k^T.
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
    for k in 0..n {
        let xk = &a.col(k)[k..];
        let nrm = norm(xk);
        if nrm == 0.0 {
            reflectors.push((Vec::new(), 0.0));
            continue;
        }
        let alpha = if xk[0] > 0.0 { -nrm } else { nrm };
        let mut v = xk.to_vec();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        let beta = if vv == 0.0 { 0.0 } else { 2.0 / vv };

        {
            let col = a.col_mut(k);
            col[k] = alpha;
            for e in &mut col[k + 1..] {
                *e = 0.0;
            }
        }
        for j in k + 1..n {
            let col = &mut a.col_mut(j)[k..];
            let s = beta * dot(&v, col);
            for (c, vi) in col.iter_mut().zip(&v) {
                *c -= s * vi;
            }
        }
        reflectors.push((v, beta));
    }

    // U = H_0 H_1 ... H_{n-1} [I_n; 0]
    let mut u = Matrix::zeros(m, n);
    for j in 0..n {
        u.set(j, j, 1.0);
    }
    for k in (0..n).rev() {
        let (v, beta) = &reflectors[k];
        if *beta == 0.0 {
            continue;
        }
        for j in 0..n {
            let col = &mut u.col_mut(j)[k..];
            let s = beta * dot(v, col);
            for (c, vi) in col.iter_mut().zip(v) {
                *c -= s * vi;
            }
        }
    }

    let mut r = Matrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            r.set(i, j, a.get(i, j));
        }
    }
    // sign convention: diag(R) >= 0
    for k in 0..n {
        if r.get(k, k) < 0.0 {
            for j in k..n {
                r.set(k, j, -r.get(k, j));
            }
            for e in u.col_mut(k) {
                *e = -*e;
            }
        }
    }

    let qr = ThinQr { u, r };
    let deficient = qr.deficient_rank();
    if deficient > 0 {
        warn!("calibration matrix is rank deficient ({deficient} of {n} pivots near zero)");
    }
    Ok(qr)
}
