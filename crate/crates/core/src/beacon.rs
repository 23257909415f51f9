//! Per-channel quantization on an unscaled integer grid.
//!
//! Each channel `w` is quantized by choosing integer codes `q` that maximize
//! `cos(Xw, X~q)`: a greedy left-to-right pass builds an initial code, then
//! cyclic coordinate sweeps replace one code at a time by the grid value that
//! maximizes the full cosine with every other code held fixed. The scale is
//! recovered afterwards as the least squares coefficient of `X~q` against
//! `Xw`. All inner loops work on the square factors of [`ReducedPair`].
//!
//! Columns are sorted by increasing norm before factorization; the greedy
//! pass visits them in that order and the sweeps visit them in reverse.

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{axpy, cosine, dot, norm, norm_sq, reduce_inputs, Matrix, ReducedPair};
use crate::grid::{IntegerGrid, Levels};
use crate::tensor_io::{QuantizedColumn, QuantizedMatrixFile};

/// Cosine improvements at or below this are treated as ties.
pub const TIE_TOL: f64 = 1e-12;

/// Below this fraction of the summed squared magnitudes, a candidate's
/// incrementally computed squared norm is recomputed from the vector itself.
const CANCELLATION_REL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnOrder {
    /// Increasing column norm for the greedy pass, decreasing for sweeps.
    NormSorted,
    /// Index order for both passes.
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeaconConfig {
    pub levels: Levels,
    pub max_loops: usize,
    pub ordering: ColumnOrder,
    pub error_correction: bool,
    pub early_stop: bool,
}

impl Default for BeaconConfig {
    fn default() -> Self {
        Self {
            levels: Levels::from_bits(4).expect("4 bits is valid"),
            max_loops: 6,
            ordering: ColumnOrder::NormSorted,
            error_correction: false,
            early_stop: true,
        }
    }
}

impl BeaconConfig {
    pub fn with_bits(bits: u8) -> Result<Self> {
        Ok(Self {
            levels: Levels::from_bits(bits)?,
            ..Self::default()
        })
    }
}

/// Permutation `perm` such that column `t` of the reordered matrix is column
/// `perm[t]` of `source`. Norm ties keep their original order.
pub fn order_columns(source: &Matrix, ordering: ColumnOrder) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..source.cols()).collect();
    if ordering == ColumnOrder::NormSorted {
        let norms = source.column_norms();
        perm.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    }
    perm
}

/// Calibration data reordered and reduced once per layer, shared by every
/// channel.
#[derive(Debug, Clone)]
pub struct Calibration {
    pair: ReducedPair,
    permutation: Vec<usize>,
    ordering: ColumnOrder,
}

impl Calibration {
    /// Orders columns by the matrix that multiplies the codes (`X~` when
    /// present) and factors the reordered inputs.
    pub fn prepare(x: &Matrix, x_tilde: Option<&Matrix>, ordering: ColumnOrder) -> Result<Self> {
        if !x.is_finite() || x_tilde.is_some_and(|m| !m.is_finite()) {
            return Err(Error::NonFiniteChannel);
        }
        let permutation = order_columns(x_tilde.unwrap_or(x), ordering);
        let xp = x.permute_columns(&permutation);
        let xtp = x_tilde.map(|m| m.permute_columns(&permutation));
        let pair = reduce_inputs(&xp, xtp.as_ref())?;
        Ok(Self {
            pair,
            permutation,
            ordering,
        })
    }

    pub fn pair(&self) -> &ReducedPair {
        &self.pair
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn dim(&self) -> usize {
        self.pair.dim()
    }

    /// Coordinate visit order for refinement sweeps, in permuted indices.
    pub fn sweep_order(&self) -> Vec<usize> {
        let n = self.dim();
        match self.ordering {
            ColumnOrder::NormSorted => (0..n).rev().collect(),
            ColumnOrder::Natural => (0..n).collect(),
        }
    }

    fn permute<T: Copy>(&self, v: &[T]) -> Vec<T> {
        self.permutation.iter().map(|&p| v[p]).collect()
    }

    fn unpermute<T: Copy + Default>(&self, v: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); v.len()];
        for (t, &p) in self.permutation.iter().enumerate() {
            out[p] = v[t];
        }
        out
    }
}

/// Inner products needed to score `base + p * col` against a fixed target
/// for every grid value `p` in O(1) each.
struct CandidateScorer<'a> {
    target: &'a [f64],
    base: &'a [f64],
    col: &'a [f64],
    target_norm: f64,
    tb: f64,
    tc: f64,
    bb: f64,
    bc: f64,
    cc: f64,
}

impl<'a> CandidateScorer<'a> {
    fn new(target: &'a [f64], target_norm: f64, base: &'a [f64], col: &'a [f64], tc: f64) -> Self {
        Self {
            target,
            base,
            col,
            target_norm,
            tb: dot(target, base),
            tc,
            bb: norm_sq(base),
            bc: dot(base, col),
            cc: norm_sq(col),
        }
    }

    /// Cosine between the target and `base + p * col`; `None` when that
    /// vector is zero.
    fn score(&self, p: i32) -> Option<f64> {
        let p = p as f64;
        let mut num = self.tb + p * self.tc;
        let mut den2 = self.bb + 2.0 * p * self.bc + p * p * self.cc;
        let scale = self.bb + p * p * self.cc;
        if den2 <= CANCELLATION_REL * scale {
            let v: Vec<f64> = self.base.iter().zip(self.col).map(|(b, c)| b + p * c).collect();
            num = dot(self.target, &v);
            den2 = norm_sq(&v);
        }
        if den2 <= 0.0 {
            return None;
        }
        Some((num / (self.target_norm * den2.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Among candidates scoring strictly above `floor`, the grid value whose
/// score is within `TIE_TOL` of the best, preferring the value nearest
/// `hint` (when given) and then the smallest value.
fn argmax_with_ties(
    grid: &IntegerGrid,
    floor: f64,
    hint: Option<f64>,
    score: impl Fn(i32) -> Option<f64>,
) -> Option<(i32, f64)> {
    let scored: Vec<(i32, f64)> = grid
        .values()
        .filter_map(|p| score(p).map(|s| (p, s)))
        .filter(|&(_, s)| s > floor)
        .collect();
    let best = scored.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
    let tied = scored.into_iter().filter(|&(_, s)| s >= best - TIE_TOL);
    match hint {
        None => tied.min_by_key(|&(p, _)| p),
        Some(h) => tied.min_by(|a, b| {
            (a.0 as f64 - h)
                .abs()
                .total_cmp(&(b.0 as f64 - h).abs())
                .then(a.0.cmp(&b.0))
        }),
    }
}

/// Real-valued min-max codes `w_t / s` with `s = (max - min) / (L - 1)`.
/// A constant channel uses `s = |w_t|`, so its codes are `+-1` (or 0).
/// The result is unchanged when `w` is multiplied by a positive constant.
pub fn minmax_codes(w: &[f64], levels: Levels) -> Vec<f64> {
    let (lo, hi) = w
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let s = if hi > lo {
        (hi - lo) / levels.max_offset() as f64
    } else {
        hi.abs()
    };
    w.iter().map(|&v| if s > 0.0 { v / s } else { 0.0 }).collect()
}

/// Greedy initial codes, in the (already permuted) coordinate order of
/// `pair`.
///
/// Step `t` picks `p` maximizing `cos(L_{<=t} w_{<=t}, L~_{<t} q_{<t} + L~_t p)`.
/// Candidates within `TIE_TOL` of the best go to the value nearest the
/// min-max code of `w_t` (see [`minmax_codes`]), then to the smallest. Such
/// ties occur whenever the partial output is still zero, since every
/// candidate of the right sign is then perfectly aligned.
///
/// A zero prefix target has no direction to align with; the grid value
/// nearest the min-max code is used instead. If every candidate output is
/// zero the grid value nearest 0 is used.
pub fn greedy_init(pair: &ReducedPair, w: &[f64], grid: &IntegerGrid) -> Vec<i32> {
    let n = pair.dim();
    assert_eq!(w.len(), n, "channel length");
    let (l, lt) = (pair.l(), pair.l_tilde());
    let hints = minmax_codes(w, grid.levels);
    let mut prefix_target = vec![0.0; n];
    let mut prefix_output = vec![0.0; n];
    let mut q = vec![0i32; n];

    for t in 0..n {
        axpy(w[t], l.col(t), &mut prefix_target);
        let target_norm = norm(&prefix_target);
        let col = lt.col(t);
        q[t] = if target_norm == 0.0 {
            grid.nearest(hints[t])
        } else {
            let scorer = CandidateScorer::new(
                &prefix_target,
                target_norm,
                &prefix_output,
                col,
                dot(&prefix_target, col),
            );
            argmax_with_ties(grid, f64::NEG_INFINITY, Some(hints[t]), |p| scorer.score(p))
                .map(|(p, _)| p)
                .unwrap_or_else(|| grid.nearest(0.0))
        };
        axpy(q[t] as f64, col, &mut prefix_output);
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOutcome {
    /// `cos(y, L~q)` after the sweep, `None` if either side is zero.
    pub cosine: Option<f64>,
    pub changed: usize,
}

/// One cyclic pass of coordinate-wise maximization of `cos(y, L~q)`.
///
/// A code only moves when another grid value beats the current one by more
/// than [`TIE_TOL`]; among such values the smallest within `TIE_TOL` of the
/// best wins. The running output `L~q` is updated in O(N) per coordinate.
pub fn refine_sweep(
    pair: &ReducedPair,
    y: &[f64],
    q: &mut [i32],
    grid: &IntegerGrid,
    visit_order: &[usize],
) -> SweepOutcome {
    let lt = pair.l_tilde();
    let n = pair.dim();
    assert_eq!(q.len(), n, "code length");
    let y_norm = norm(y);
    if y_norm == 0.0 {
        return SweepOutcome {
            cosine: None,
            changed: 0,
        };
    }

    let qf: Vec<f64> = q.iter().map(|&v| v as f64).collect();
    let mut output = lt.mul_vec(&qf);
    let mut rest = vec![0.0; n];
    let mut changed = 0;

    for &t in visit_order {
        let col = lt.col(t);
        let current = q[t];
        rest.copy_from_slice(&output);
        axpy(-(current as f64), col, &mut rest);

        let scorer = CandidateScorer::new(y, y_norm, &rest, col, dot(y, col));
        let floor = scorer.score(current).map_or(f64::NEG_INFINITY, |s| s + TIE_TOL);
        if let Some((p, _)) = argmax_with_ties(grid, floor, None, |p| scorer.score(p)) {
            if p != current {
                q[t] = p;
                axpy(p as f64, col, &mut rest);
                output.copy_from_slice(&rest);
                changed += 1;
            }
        }
    }

    let qf: Vec<f64> = q.iter().map(|&v| v as f64).collect();
    SweepOutcome {
        cosine: cosine(y, &lt.mul_vec(&qf)).ok(),
        changed,
    }
}

/// Result of quantizing one channel. Codes are in the channel's original
/// coordinate order; the reconstruction is `scale * q`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelResult {
    pub q: Vec<i32>,
    pub scale: f64,
    pub zero_point: i32,
    /// `cos(Xw, X~q)` after the greedy pass and after each executed sweep.
    pub e_trace: Vec<f64>,
    /// First sweep that changed no code.
    pub converged_at: Option<usize>,
    pub permutation: Vec<usize>,
    /// Set when `X~q = 0`, in which case the scale is 0.
    pub degenerate: bool,
}

impl ChannelResult {
    /// Wraps codes produced by another quantizer; there is no sweep trace.
    pub fn from_codes(q: Vec<i32>, scale: f64, zero_point: i32) -> Self {
        let n = q.len();
        Self {
            q,
            scale,
            zero_point,
            e_trace: Vec::new(),
            converged_at: None,
            permutation: (0..n).collect(),
            degenerate: scale == 0.0,
        }
    }

    pub fn sweeps(&self) -> usize {
        self.e_trace.len().saturating_sub(1)
    }

    pub fn final_cosine(&self) -> Option<f64> {
        self.e_trace.last().copied()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        crate::grid::dequantize(&self.q, self.scale)
    }
}

/// Quantizes one channel `w` (original coordinate order) against prepared
/// calibration data. The column order comes from `cal`; `cfg.ordering` is
/// only consulted by [`beacon_matrix`] when preparing it.
pub fn beacon_channel(cal: &Calibration, w: &[f64], cfg: &BeaconConfig) -> Result<ChannelResult> {
    let pair = cal.pair();
    if w.len() != cal.dim() {
        return Err(Error::Shape(format!(
            "channel has {} entries, calibration has {} columns",
            w.len(),
            cal.dim()
        )));
    }
    let grid = IntegerGrid::for_channel(w, cfg.levels)?;
    let wp = cal.permute(w);
    let y = pair.target(&wp);
    let trace_cos = |q: &[i32]| {
        let qf: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        pair.cosine(&wp, &qf).unwrap_or(0.0)
    };

    let mut q = greedy_init(pair, &wp, &grid);
    let mut e_trace = vec![trace_cos(&q)];
    let mut converged_at = None;
    let order = cal.sweep_order();
    for sweep in 1..=cfg.max_loops {
        let outcome = refine_sweep(pair, &y, &mut q, &grid, &order);
        e_trace.push(trace_cos(&q));
        if outcome.changed == 0 {
            converged_at.get_or_insert(sweep);
            if cfg.early_stop {
                break;
            }
        }
    }

    let qf: Vec<f64> = q.iter().map(|&v| v as f64).collect();
    let (scale, degenerate) = match pair.optimal_scale(&wp, &qf) {
        Ok(c) => (c, false),
        Err(Error::ZeroQuantizedOutput) => (0.0, true),
        Err(e) => return Err(e),
    };

    Ok(ChannelResult {
        q: cal.unpermute(&q),
        scale,
        zero_point: grid.zero_point,
        e_trace,
        converged_at,
        permutation: cal.permutation.clone(),
        degenerate,
    })
}

/// Quantized layer: one [`ChannelResult`] per column of `W`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizedMatrix {
    pub levels: Levels,
    pub channels: Vec<ChannelResult>,
}

impl QuantizedMatrix {
    pub fn n_rows(&self) -> usize {
        self.channels.first().map_or(0, |c| c.q.len())
    }

    pub fn n_cols(&self) -> usize {
        self.channels.len()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.scale).collect()
    }

    pub fn negative_scales(&self) -> usize {
        self.channels.iter().filter(|c| c.scale < 0.0).count()
    }

    /// `Q Diag(s)` as a dense N x N' matrix.
    pub fn dequantize(&self) -> Matrix {
        let cols: Vec<Vec<f64>> = self.channels.iter().map(|c| c.dequantize()).collect();
        Matrix::from_columns(self.n_rows(), &cols)
    }

    pub fn to_file(&self) -> Result<QuantizedMatrixFile> {
        let columns = self
            .channels
            .iter()
            .enumerate()
            .map(|(col, c)| {
                let codes = c
                    .q
                    .iter()
                    .enumerate()
                    .map(|(row, &v)| {
                        let k = v as i64 - c.zero_point as i64;
                        if k < 0 || k > self.levels.max_offset() as i64 {
                            return Err(Error::CodeOutOfRange {
                                col,
                                row,
                                code: k.clamp(0, u32::MAX as i64) as u32,
                                max: self.levels.max_offset() as u32,
                            });
                        }
                        Ok(k as u8)
                    })
                    .collect::<Result<Vec<u8>>>()?;
                Ok(QuantizedColumn {
                    zero_point: c.zero_point,
                    scale: c.scale,
                    codes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantizedMatrixFile {
            bits: self.levels.storage_bits(),
            n_rows: self.n_rows() as u64,
            n_cols: self.n_cols() as u64,
            columns,
        })
    }

    /// Rebuilds codes and scales from a stored layer. The level count is
    /// taken as `2^bits`; traces are empty.
    pub fn from_file(f: &QuantizedMatrixFile) -> Result<Self> {
        f.validate()?;
        let channels = f
            .columns
            .iter()
            .map(|c| {
                let q = c.codes.iter().map(|&k| k as i32 + c.zero_point).collect();
                ChannelResult::from_codes(q, c.scale, c.zero_point)
            })
            .collect();
        Ok(Self {
            levels: Levels::from_bits(f.bits)?,
            channels,
        })
    }
}

/// Quantizes every column of `w` (N x N') against calibration `x` (m x N).
///
/// With `cfg.error_correction` the codes multiply the perturbed inputs
/// `x_tilde`; otherwise `x_tilde` is ignored. Channels run in parallel on the
/// current rayon pool and the output does not depend on the thread count.
pub fn beacon_matrix(
    x: &Matrix,
    x_tilde: Option<&Matrix>,
    w: &Matrix,
    cfg: &BeaconConfig,
) -> Result<QuantizedMatrix> {
    if x.cols() != w.rows() {
        return Err(Error::Shape(format!(
            "calibration has {} columns but weights have {} rows",
            x.cols(),
            w.rows()
        )));
    }
    let x_tilde = match (cfg.error_correction, x_tilde) {
        (true, None) => return Err(Error::MissingPerturbedCalibration),
        (true, Some(xt)) => Some(xt),
        (false, Some(_)) => {
            warn!("perturbed calibration ignored without error correction");
            None
        }
        (false, None) => None,
    };
    let cal = Calibration::prepare(x, x_tilde, cfg.ordering)?;
    let channels = (0..w.cols())
        .into_par_iter()
        .map(|j| beacon_channel(&cal, w.col(j), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedMatrix {
        levels: cfg.levels,
        channels,
    })
}

/// One exported per-channel scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleRecord {
    pub col: usize,
    pub c: f64,
    pub z: i32,
    pub b: u8,
    /// Present only when the level count is not a power of two.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<u32>,
}

/// Per-channel `(c, z, b)` in column order, for use by other quantizers in
/// place of a min-max scale.
pub fn export_scales(qm: &QuantizedMatrix) -> Vec<ScaleRecord> {
    let levels = (!qm.levels.is_power_of_two()).then(|| qm.levels.count());
    qm.channels
        .iter()
        .enumerate()
        .map(|(col, c)| ScaleRecord {
            col,
            c: c.scale,
            z: c.zero_point,
            b: qm.levels.storage_bits(),
            levels,
        })
        .collect()
}

pub fn export_scales_json(qm: &QuantizedMatrix) -> Result<String> {
    Ok(serde_json::to_string_pretty(&export_scales(qm))?)
}
