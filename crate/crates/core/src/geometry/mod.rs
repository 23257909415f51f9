//! Cosine alignment, the closed-form optimal scale, and the reduction of a
//! tall calibration problem to square triangular factors.
//!
//! For a channel `w` with integer codes `q`, the best scale is the 1-D least
//! squares coefficient `c = <Xw, X~q> / ||X~q||^2`, and the remaining error is
//! `||Xw||^2 (1 - cos^2)`. Minimizing the error over `q` is therefore the same
//! as maximizing `cos(Xw, X~q)`, which only depends on inner products and so
//! survives multiplication by `U^T` where `X~ = U R`.

mod matrix;
mod qr;

pub use matrix::{axpy, dot, norm, norm_sq, Matrix};
pub use qr::{thin_qr, ThinQr, RANK_TOL};

use crate::error::{Error, Result};

/// Cosine of the angle between `a` and `v`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], v: &[f64]) -> Result<f64> {
    let denom = norm_product(norm_sq(a), norm_sq(v));
    if denom == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, v) / denom).clamp(-1.0, 1.0))
}

/// `sqrt(aa) * sqrt(vv)` with a single rounding when the product is
/// representable, so parallel vectors score exactly 1.
fn norm_product(aa: f64, vv: f64) -> f64 {
    let p = aa * vv;
    if p.is_normal() {
        p.sqrt()
    } else {
        aa.sqrt() * vv.sqrt()
    }
}

/// The `c` minimizing `||y - c v||^2`.
pub fn optimal_scale(y: &[f64], v: &[f64]) -> Result<f64> {
    let vv = norm_sq(v);
    if vv == 0.0 {
        return Err(Error::ZeroQuantizedOutput);
    }
    Ok(dot(y, v) / vv)
}

/// Squared residual `||y - c v||^2`.
pub fn residual(y: &[f64], v: &[f64], c: f64) -> f64 {
    y.iter().zip(v).map(|(a, b)| (a - c * b).powi(2)).sum()
}

/// `||y||^2 (1 - cos(y, v)^2)`: the residual left by the optimal scale.
/// A zero `v` leaves all of `||y||^2`.
pub fn projected_residual(y: &[f64], v: &[f64]) -> f64 {
    let yy = norm_sq(y);
    match cosine(y, v) {
        Ok(cos) => yy * (1.0 - cos * cos),
        Err(_) => yy,
    }
}

/// Square stand-ins for the calibration matrices.
///
/// Without error correction `L = L~ = R` from `X = U R`. With a perturbed
/// input `X~ = U R`, `L = U^T X` and `L~ = R`. In the latter case `||Lw||` can
/// be smaller than `||Xw||`, so the triangular factor of `X` is kept to
/// recover the exact `||Xw||` and make [`ReducedPair::cosine`] agree with the
/// cosine on the raw matrices.
#[derive(Debug, Clone)]
pub struct ReducedPair {
    l: Matrix,
    l_tilde: Matrix,
    target_factor: Option<Matrix>,
    col_norms: Vec<f64>,
}

impl ReducedPair {
    pub fn dim(&self) -> usize {
        self.l_tilde.cols()
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn l_tilde(&self) -> &Matrix {
        &self.l_tilde
    }

    /// ℓ2 norms of the columns of `L~` (equal to those of `X~`).
    pub fn col_norms(&self) -> &[f64] {
        &self.col_norms
    }

    pub fn has_error_correction(&self) -> bool {
        self.target_factor.is_some()
    }

    /// `L w`.
    pub fn target(&self, w: &[f64]) -> Vec<f64> {
        self.l.mul_vec(w)
    }

    /// `||X w||`.
    pub fn target_norm(&self, w: &[f64]) -> f64 {
        match &self.target_factor {
            Some(rx) => norm(&rx.mul_vec(w)),
            None => norm(&self.l.mul_vec(w)),
        }
    }

    /// `L~ q`.
    pub fn output(&self, q: &[f64]) -> Vec<f64> {
        self.l_tilde.mul_vec(q)
    }

    /// `cos(Xw, X~q)` evaluated on the reduced factors, or `None` when
    /// either side is zero.
    pub fn cosine(&self, w: &[f64], q: &[f64]) -> Option<f64> {
        let y = self.target(w);
        let v = self.output(q);
        let t = self.target_norm(w);
        let denom = norm_product(t * t, norm_sq(&v));
        if denom == 0.0 {
            return None;
        }
        Some((dot(&y, &v) / denom).clamp(-1.0, 1.0))
    }

    /// `<Xw, X~q> / ||X~q||^2`.
    pub fn optimal_scale(&self, w: &[f64], q: &[f64]) -> Result<f64> {
        optimal_scale(&self.target(w), &self.output(q))
    }
}

/// Factors the calibration data once so every channel can work with `N x N`
/// matrices instead of `m x N`.
pub fn reduce_inputs(x: &Matrix, x_tilde: Option<&Matrix>) -> Result<ReducedPair> {
    match x_tilde {
        None => {
            let ThinQr { r, .. } = thin_qr(x)?;
            let col_norms = r.column_norms();
            Ok(ReducedPair {
                l: r.clone(),
                l_tilde: r,
                target_factor: None,
                col_norms,
            })
        }
        Some(xt) => {
            if xt.rows() != x.rows() || xt.cols() != x.cols() {
                return Err(Error::Shape(format!(
                    "perturbed calibration is {}x{}, calibration is {}x{}",
                    xt.rows(),
                    xt.cols(),
                    x.rows(),
                    x.cols()
                )));
            }
            let ThinQr { u, r } = thin_qr(xt)?;
            let l = u.tr_matmul(x);
            let target_factor = thin_qr(x)?.r;
            let col_norms = r.column_norms();
            Ok(ReducedPair {
                l,
                l_tilde: r,
                target_factor: Some(target_factor),
                col_norms,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
        let data: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_row_major(m, n, &data)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let a = random_vec(&mut rng, 5);
            let v = random_vec(&mut rng, 5);
            let t: f64 = rng.random_range(0.1..10.0);
            let tv: Vec<f64> = v.iter().map(|x| x * t).collect();
            let ntv: Vec<f64> = v.iter().map(|x| -x * t).collect();
            let base = cosine(&a, &v).unwrap();
            assert!((cosine(&a, &tv).unwrap() - base).abs() < 1e-12);
            assert!((cosine(&a, &ntv).unwrap() + base).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let q = thin_qr(&random_matrix(&mut rng, 6, 6)).unwrap().u;
            let a = random_vec(&mut rng, 6);
            let v = random_vec(&mut rng, 6);
            let ra = q.mul_vec(&a);
            let rv = q.mul_vec(&v);
            assert!((cosine(&ra, &rv).unwrap() - cosine(&a, &v).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_scale_examples() {
        assert_eq!(optimal_scale(&[2.0, 4.0], &[1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(optimal_scale(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // X = [[1,0],[1,1]], w = (1,1), q = (1,2)
        let x = Matrix::from_row_major(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let y = x.mul_vec(&[1.0, 1.0]);
        let v = x.mul_vec(&[1.0, 2.0]);
        assert_eq!(y, vec![1.0, 2.0]);
        assert_eq!(v, vec![1.0, 3.0]);
        assert!((optimal_scale(&y, &v).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(
            optimal_scale(&[1.0], &[0.0]),
            Err(Error::ZeroQuantizedOutput)
        ));
    }

    #[test]
    fn optimal_scale_is_unique_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let y = random_vec(&mut rng, 7);
            let v = random_vec(&mut rng, 7);
            let c = optimal_scale(&y, &v).unwrap();
            let best = residual(&y, &v, c);
            assert!((best - projected_residual(&y, &v)).abs() <= 1e-12 * norm_sq(&y));
            for _ in 0..10 {
                let d: f64 = rng.random_range(-1.0..1.0);
                assert!(residual(&y, &v, c + d) > best);
            }
        }
    }

    #[test]
    fn residual_edge_cases() {
        assert_eq!(residual(&[1.0, 2.0], &[1.0, 2.0], 1.0), 0.0);
        assert_eq!(residual(&[1.0, 2.0], &[2.0, -1.0], 0.0), 5.0);
        assert_eq!(projected_residual(&[1.0, 2.0], &[2.0, -1.0]), 5.0);
        assert_eq!(projected_residual(&[1.0, 2.0], &[0.0, 0.0]), 5.0);
    }

    #[test]
    fn reduction_without_error_correction() {
        let pair = reduce_inputs(&Matrix::identity(3), None).unwrap();
        assert_eq!(pair.l(), &Matrix::identity(3));
        assert_eq!(pair.l_tilde(), &Matrix::identity(3));
        assert!(!pair.has_error_correction());
    }

    #[test]
    fn reduction_with_identical_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_matrix(&mut rng, 9, 4);
        let pair = reduce_inputs(&x, Some(&x)).unwrap();
        assert!(pair.l().sub(pair.l_tilde()).frobenius_norm() < 1e-12);
    }

    #[test]
    fn reduced_cosine_matches_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 12, 5);
            let xt = random_matrix(&mut rng, 12, 5);
            let w = random_vec(&mut rng, 5);
            let q: Vec<f64> = (0..5).map(|_| rng.random_range(-2..=2) as f64).collect();
            if q.iter().all(|&v| v == 0.0) {
                continue;
            }
            for pair_in in [None, Some(&xt)] {
                let pair = reduce_inputs(&x, pair_in).unwrap();
                let rhs = pair_in.unwrap_or(&x);
                let raw = cosine(&x.mul_vec(&w), &rhs.mul_vec(&q)).unwrap();
                let red = pair.cosine(&w, &q).unwrap();
                assert!((raw - red).abs() <= 1e-9 * raw.abs().max(1e-300));
                let raw_c = optimal_scale(&x.mul_vec(&w), &rhs.mul_vec(&q)).unwrap();
                let red_c = pair.optimal_scale(&w, &q).unwrap();
                assert!((raw_c - red_c).abs() <= 1e-12 * raw_c.abs().max(1.0));
            }
        }
    }
}
