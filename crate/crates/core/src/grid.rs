//! Unscaled integer grids and the min-max round-to-nearest baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of points in a grid. Usually `2^b`, but any count in `2..=256` is
/// allowed so the ternary alphabet `{z, z+1, z+2}` can be expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Levels(u16);

impl Levels {
    pub const TERNARY: Levels = Levels(3);

    pub fn from_bits(bits: u8) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::UnsupportedBits(bits));
        }
        Ok(Self(1 << bits))
    }

    pub fn new(count: u32) -> Result<Self> {
        if !(2..=256).contains(&count) {
            return Err(Error::UnsupportedLevels(count));
        }
        Ok(Self(count as u16))
    }

    pub fn count(self) -> u32 {
        self.0 as u32
    }

    /// Largest code offset, `levels - 1`.
    pub fn max_offset(self) -> i32 {
        self.0 as i32 - 1
    }

    /// Bits needed to store one code offset.
    pub fn storage_bits(self) -> u8 {
        (u16::BITS - (self.0 - 1).leading_zeros()) as u8
    }

    pub fn is_power_of_two(self) -> bool {
        self.0.is_power_of_two()
    }
}

/// The alphabet `{z, z+1, ..., z + levels - 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegerGrid {
    pub levels: Levels,
    pub zero_point: i32,
}

impl IntegerGrid {
    pub fn new(levels: Levels, zero_point: i32) -> Self {
        Self { levels, zero_point }
    }

    /// Grid for channel `w` with the zero point from [`zero_point`].
    pub fn for_channel(w: &[f64], levels: Levels) -> Result<Self> {
        Ok(Self::new(levels, zero_point(w, levels)?))
    }

    pub fn min(&self) -> i32 {
        self.zero_point
    }

    pub fn max(&self) -> i32 {
        self.zero_point + self.levels.max_offset()
    }

    pub fn len(&self) -> usize {
        self.levels.count() as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, q: i32) -> bool {
        (self.min()..=self.max()).contains(&q)
    }

    /// Grid values in increasing order.
    pub fn values(&self) -> impl Iterator<Item = i32> + Clone {
        self.min()..=self.max()
    }

    /// The grid value closest to `x`; the smaller one on a tie.
    pub fn nearest(&self, x: f64) -> i32 {
        let lo = self.min() as f64;
        let hi = self.max() as f64;
        let x = x.clamp(lo, hi);
        let f = x.floor();
        let v = if x - f > 0.5 { f + 1.0 } else { f };
        v as i32
    }
}

/// Zero point `round(min(w) / (max(w) - min(w)) * (levels - 1))`, rounding
/// half to even. A constant channel gets `z = 0`.
pub fn zero_point(w: &[f64], levels: Levels) -> Result<i32> {
    let (lo, hi) = min_max(w)?;
    if hi == lo {
        return Ok(0);
    }
    let z = (lo / (hi - lo) * levels.max_offset() as f64).round_ties_even();
    Ok(z as i32)
}

fn min_max(w: &[f64]) -> Result<(f64, f64)> {
    if w.is_empty() {
        return Err(Error::EmptyChannel);
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteChannel);
    }
    Ok(w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    }))
}

/// Min-max RTN parameters; `alpha = beta = 1` is the standard grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtnConfig {
    pub levels: Levels,
    pub alpha: f64,
    pub beta: f64,
}

impl RtnConfig {
    pub fn new(levels: Levels, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
            return Err(Error::InvalidRtnConfig { alpha, beta });
        }
        Ok(Self { levels, alpha, beta })
    }

    pub fn min_max(levels: Levels) -> Self {
        Self {
            levels,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// Codes and scale for one channel; the reconstruction is `scale * q`.
#[derive(Debug, Clone, PartialEq)]
pub struct RtnChannel {
    pub q: Vec<i32>,
    pub scale: f64,
    pub zero_point: i32,
}

/// Round-to-nearest on the grid `scale * {z, ..., z + levels - 1}`.
pub fn rtn_quantize(w: &[f64], cfg: &RtnConfig) -> Result<RtnChannel> {
    let (lo, hi) = min_max(w)?;
    if hi == lo {
        // constant channel: q = 1, scale from the least squares fit against q
        let n = w.len() as f64;
        return Ok(RtnChannel {
            q: vec![1; w.len()],
            scale: w.iter().sum::<f64>() / n,
            zero_point: 0,
        });
    }
    let scale = (cfg.alpha * hi - cfg.beta * lo) / cfg.levels.max_offset() as f64;
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::NonPositiveScale(scale));
    }
    let grid = IntegerGrid::for_channel(w, cfg.levels)?;
    Ok(RtnChannel {
        q: rtn_codes(w, &grid, scale)?,
        scale,
        zero_point: grid.zero_point,
    })
}

/// `q_i = clip(round(w_i / scale - z), 0, levels - 1) + z` for a given scale.
pub fn rtn_codes(w: &[f64], grid: &IntegerGrid, scale: f64) -> Result<Vec<i32>> {
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::NonPositiveScale(scale));
    }
    let z = grid.zero_point as f64;
    let top = grid.levels.max_offset() as f64;
    Ok(w.iter()
        .map(|&wi| {
            let k = (wi / scale - z).round_ties_even().clamp(0.0, top);
            k as i32 + grid.zero_point
        })
        .collect())
}

pub fn dequantize(q: &[i32], scale: f64) -> Vec<f64> {
    q.iter().map(|&v| scale * v as f64).collect()
}
