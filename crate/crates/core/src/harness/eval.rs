use std::collections::BTreeMap;

use serde::Serialize;

use crate::beacon::QuantizedMatrix;
use crate::error::{Error, Result};
use crate::geometry::{cosine, norm_sq, Matrix};
use crate::tensor_io::packed_len;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelMetrics {
    pub col: usize,
    /// `cos(Xw, X~ c q)`; 0 when either side vanishes.
    pub cosine: f64,
    /// `||Xw - c X~q||^2`.
    pub residual: f64,
    pub scale: f64,
    pub zero_point: i32,
    pub sweeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// `||XW - X~ Q Diag(s)||_F / ||XW||_F`.
    pub rel_error: f64,
    pub mean_cosine: f64,
    pub min_cosine: f64,
    /// Stored bits per weight including the 96-bit per-channel header.
    pub bits_per_weight: f64,
    pub negative_scales: usize,
    pub degenerate_channels: usize,
    /// Number of channels per executed sweep count.
    pub sweep_histogram: BTreeMap<usize, usize>,
    /// Largest `|residual - ||Xw||^2 (1 - cos^2)| / ||Xw||^2` over channels;
    /// near zero whenever every scale is the least squares optimum.
    pub max_projection_gap: f64,
    pub wall_ms: f64,
    pub channels: Vec<ChannelMetrics>,
}

/// Scores a quantized layer against the full-precision outputs `XW`.
pub fn evaluate(
    w: &Matrix,
    x: &Matrix,
    x_tilde: Option<&Matrix>,
    qm: &QuantizedMatrix,
) -> Result<EvalReport> {
    let xt = x_tilde.unwrap_or(x);
    if x.cols() != w.rows() || xt.rows() != x.rows() || xt.cols() != x.cols() {
        return Err(Error::Shape(format!(
            "weights {}x{}, calibration {}x{}, perturbed {}x{}",
            w.rows(),
            w.cols(),
            x.rows(),
            x.cols(),
            xt.rows(),
            xt.cols()
        )));
    }
    if qm.n_cols() != w.cols() || (qm.n_cols() > 0 && qm.n_rows() != w.rows()) {
        return Err(Error::Shape(format!(
            "quantized layer is {}x{}, weights are {}x{}",
            qm.n_rows(),
            qm.n_cols(),
            w.rows(),
            w.cols()
        )));
    }

    let mut channels = Vec::with_capacity(w.cols());
    let mut total_ref = 0.0;
    let mut total_resid = 0.0;
    let mut max_gap: f64 = 0.0;
    let mut histogram = BTreeMap::new();
    for (j, ch) in qm.channels.iter().enumerate() {
        let y = x.mul_vec(w.col(j));
        let v = xt.mul_vec(&ch.dequantize());
        let residual: f64 = y.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
        let yy = norm_sq(&y);
        let cos = cosine(&y, &v).unwrap_or(0.0);
        if yy > 0.0 {
            max_gap = max_gap.max((residual - yy * (1.0 - cos * cos)).abs() / yy);
        }
        total_ref += yy;
        total_resid += residual;
        if !ch.e_trace.is_empty() {
            *histogram.entry(ch.sweeps()).or_insert(0) += 1;
        }
        channels.push(ChannelMetrics {
            col: j,
            cosine: cos,
            residual,
            scale: ch.scale,
            zero_point: ch.zero_point,
            sweeps: ch.sweeps(),
        });
    }

    let rel_error = if total_ref > 0.0 {
        (total_resid / total_ref).sqrt()
    } else if total_resid == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let n = w.rows().max(1);
    let stored_bits = packed_len(n, qm.levels.storage_bits()) * 8 + 32 + 64;
    let cosines = channels.iter().map(|c| c.cosine);
    Ok(EvalReport {
        rel_error,
        mean_cosine: cosines.clone().sum::<f64>() / channels.len().max(1) as f64,
        min_cosine: cosines.fold(f64::INFINITY, f64::min),
        bits_per_weight: stored_bits as f64 / n as f64,
        negative_scales: qm.negative_scales(),
        degenerate_channels: qm.channels.iter().filter(|c| c.degenerate).count(),
        sweep_histogram: histogram,
        max_projection_gap: max_gap,
        wall_ms: 0.0,
        channels,
    })
}
