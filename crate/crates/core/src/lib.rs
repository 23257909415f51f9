//! Per-channel post-training weight quantization with automatic scaling.
//!
//! Each weight channel is quantized on a fixed, unscaled integer grid by
//! maximizing the cosine between the calibrated outputs of the original and
//! the quantized channel. The per-channel scale then follows in closed form
//! as a 1-D least squares fit.
//!
//! Modules:
//! - [`tensor_io`]: `BCN1` tensor and `BCNQ` quantized-layer files.
//! - [`grid`]: zero points, integer alphabets and the min-max RTN baseline.
//! - [`geometry`]: QR, cosine alignment, optimal scale, square reduction.
//! - [`beacon`]: the quantizer itself.
//! - [`oracle`]: exhaustive search and RTN baselines for validation.
//! - [`harness`]: synthetic layers and evaluation reports.
//! - [`cli`]: the `beacon` command line.

pub mod beacon;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod oracle;
pub mod tensor_io;

pub use beacon::{
    beacon_channel, beacon_matrix, export_scales, BeaconConfig, Calibration, ChannelResult,
    ColumnOrder, QuantizedMatrix,
};
pub use error::{Error, Result};
pub use geometry::Matrix;
pub use grid::{IntegerGrid, Levels};
