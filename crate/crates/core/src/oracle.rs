//! Exhaustive ground truth for tiny channels, plus the RTN baselines.
//!
//! Everything here works directly on the raw calibration matrices and never
//! touches the QR reduction used by the main algorithm.

use crate::beacon::{ChannelResult, QuantizedMatrix};
use crate::error::{Error, Result};
use crate::geometry::{cosine, dot, norm_sq, Matrix};
use crate::grid::{rtn_quantize, IntegerGrid, Levels, RtnConfig};

pub const DEFAULT_LIMIT: u64 = 1_000_000;
pub const FIXED_POINT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub q_star: Vec<i32>,
    pub c_star: f64,
    pub cos_star: f64,
    pub enumerated: u64,
}

fn check_dims(x: &Matrix, x_tilde: Option<&Matrix>, n: usize) -> Result<()> {
    if x.cols() != n {
        return Err(Error::Shape(format!(
            "channel has {n} entries, calibration has {} columns",
            x.cols()
        )));
    }
    if let Some(xt) = x_tilde {
        if xt.rows() != x.rows() || xt.cols() != x.cols() {
            return Err(Error::Shape("perturbed calibration shape differs".into()));
        }
    }
    Ok(())
}

fn as_f64(q: &[i32]) -> Vec<f64> {
    q.iter().map(|&v| v as f64).collect()
}

/// `cos(Xw, X~q)` on the raw matrices, `None` when either side is zero.
pub fn alignment(x: &Matrix, x_tilde: Option<&Matrix>, w: &[f64], q: &[i32]) -> Option<f64> {
    let y = x.mul_vec(w);
    let v = x_tilde.unwrap_or(x).mul_vec(&as_f64(q));
    cosine(&y, &v).ok()
}

/// Enumerates all of `A^N` and returns the code with the largest
/// `cos(Xw, X~q)`. Exact ties go to the lexicographically smallest code.
pub fn exhaustive_best(
    x: &Matrix,
    x_tilde: Option<&Matrix>,
    w: &[f64],
    grid: &IntegerGrid,
    limit: u64,
) -> Result<OracleResult> {
    let n = w.len();
    check_dims(x, x_tilde, n)?;
    let radix = grid.len() as u64;
    let needed = (radix as f64).powi(n as i32);
    if needed > limit as f64 {
        return Err(Error::TooLarge { needed, limit });
    }
    let total = radix.pow(n as u32);
    let xt = x_tilde.unwrap_or(x);
    let y = x.mul_vec(w);
    if norm_sq(&y) == 0.0 {
        return Err(Error::ZeroVector);
    }

    let mut q = vec![grid.min(); n];
    let mut best: Option<(Vec<i32>, f64)> = None;
    for idx in 0..total {
        if idx > 0 {
            // mixed-radix increment, q_1 fastest
            for v in q.iter_mut() {
                if *v < grid.max() {
                    *v += 1;
                    break;
                }
                *v = grid.min();
            }
        }
        let Ok(c) = cosine(&y, &xt.mul_vec(&as_f64(&q))) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((bq, bc)) => c > *bc || (c == *bc && q < *bq),
        };
        if better {
            best = Some((q.clone(), c));
        }
    }

    let (q_star, cos_star) = best.ok_or(Error::ZeroQuantizedOutput)?;
    let v = xt.mul_vec(&as_f64(&q_star));
    Ok(OracleResult {
        c_star: dot(&y, &v) / norm_sq(&v),
        q_star,
        cos_star,
        enumerated: total,
    })
}

/// Whether `c` equals `<Xw, X~q> / ||X~q||^2` to within
/// `FIXED_POINT_TOL * max(1, |c|)`.
pub fn verify_fixed_point(
    x: &Matrix,
    x_tilde: Option<&Matrix>,
    w: &[f64],
    q: &[i32],
    c: f64,
) -> Result<bool> {
    check_dims(x, x_tilde, w.len())?;
    let y = x.mul_vec(w);
    let v = x_tilde.unwrap_or(x).mul_vec(&as_f64(q));
    let vv = norm_sq(&v);
    if vv == 0.0 {
        return Err(Error::ZeroQuantizedOutput);
    }
    let expected = dot(&y, &v) / vv;
    Ok((c - expected).abs() <= FIXED_POINT_TOL * c.abs().max(1.0))
}

/// RTN codes from the standard min-max grid with the scale re-fit by least
/// squares against the calibration data.
pub fn rtn_refit(
    w: &[f64],
    x: &Matrix,
    x_tilde: Option<&Matrix>,
    levels: Levels,
) -> Result<ChannelResult> {
    check_dims(x, x_tilde, w.len())?;
    let rtn = rtn_quantize(w, &RtnConfig::min_max(levels))?;
    let y = x.mul_vec(w);
    let v = x_tilde.unwrap_or(x).mul_vec(&as_f64(&rtn.q));
    let vv = norm_sq(&v);
    let scale = if vv == 0.0 { 0.0 } else { dot(&y, &v) / vv };
    Ok(ChannelResult::from_codes(rtn.q, scale, rtn.zero_point))
}

/// Min-max RTN on every column of `w`.
pub fn rtn_matrix(w: &Matrix, levels: Levels) -> Result<QuantizedMatrix> {
    let cfg = RtnConfig::min_max(levels);
    let channels = (0..w.cols())
        .map(|j| {
            let r = rtn_quantize(w.col(j), &cfg)?;
            Ok(ChannelResult::from_codes(r.q, r.scale, r.zero_point))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedMatrix { levels, channels })
}

/// [`rtn_refit`] on every column of `w`.
pub fn rtn_refit_matrix(
    x: &Matrix,
    x_tilde: Option<&Matrix>,
    w: &Matrix,
    levels: Levels,
) -> Result<QuantizedMatrix> {
    let channels = (0..w.cols())
        .map(|j| rtn_refit(w.col(j), x, x_tilde, levels))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedMatrix { levels, channels })
}
