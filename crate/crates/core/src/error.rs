use std::io;

use thiserror::Error;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic bytes {found:02x?}, expected {expected:02x?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported dtype code {0} (only 0 = f32 is supported)")]
    UnsupportedDtype(u8),

    #[error("unsupported file version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated payload: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("{0} unexpected trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("data length {len} does not match product of dims {dims:?}")]
    DimMismatch { dims: Vec<u64>, len: usize },

    #[error("unsupported bit width {0}, expected 1..=8")]
    UnsupportedBits(u8),

    #[error("unsupported level count {0}, expected 2..=256")]
    UnsupportedLevels(u32),

    #[error("column {col}, row {row}: code {code} outside [0, {max}]")]
    CodeOutOfRange { col: usize, row: usize, code: u32, max: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty channel")]
    EmptyChannel,

    #[error("channel contains a non-finite value")]
    NonFiniteChannel,

    #[error("scale {0} is not positive")]
    NonPositiveScale(f64),

    #[error("invalid rtn parameters alpha={alpha}, beta={beta}")]
    InvalidRtnConfig { alpha: f64, beta: f64 },

    #[error("calibration has {rows} rows but {cols} columns; need rows >= cols")]
    ShortCalibration { rows: usize, cols: usize },

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("quantized output X~q is zero")]
    ZeroQuantizedOutput,

    #[error("error correction requested without perturbed calibration")]
    MissingPerturbedCalibration,

    #[error("exhaustive search needs {needed} candidates, limit is {limit}")]
    TooLarge { needed: f64, limit: u64 },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("thread pool: {0}")]
    ThreadPool(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
