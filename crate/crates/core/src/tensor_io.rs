//! Binary persistence for dense tensors and quantized layers.
//!
//! Two little-endian formats are supported:
//!
//! * `BCN1` tensors: magic, dtype byte (0 = f32), ndim byte, `ndim` u64 dims,
//!   then the row-major f32 payload.
//! * `BCNQ` quantized matrices: magic, version byte (1), bits byte, u32
//!   reserved, u64 rows, u64 cols, then per column an i32 zero point, an f64
//!   scale and `ceil(rows * bits / 8)` bytes of bit-packed codes. Codes are
//!   stored as offsets `k = q - z` and packed lowest-bits-first.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Matrix;

pub const TENSOR_MAGIC: [u8; 4] = *b"BCN1";
pub const QUANT_MAGIC: [u8; 4] = *b"BCNQ";
pub const QUANT_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const QUANT_HEADER_LEN: usize = 4 + 1 + 1 + 4 + 8 + 8;

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<u64>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("{} dims exceeds 255", dims.len())));
        }
        match element_count(&dims) {
            Some(n) if n == data.len() => Ok(Self { dims, data }),
            _ => Err(Error::DimMismatch { dims, len: data.len() }),
        }
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Widens a 2-D tensor to an f64 matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.dims.len() != 2 {
            return Err(Error::Shape(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            )));
        }
        let data: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        Ok(Matrix::from_row_major(
            self.dims[0] as usize,
            self.dims[1] as usize,
            &data,
        ))
    }

    /// Narrows a matrix to f32, row-major.
    pub fn from_matrix(m: &Matrix) -> Self {
        let data = m.to_row_major().into_iter().map(|v| v as f32).collect();
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data,
        }
    }
}

fn element_count(dims: &[u64]) -> Option<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
}

/// Byte length of the encoded tensor.
pub fn encoded_tensor_len(t: &Tensor) -> usize {
    4 + 1 + 1 + 8 * t.dims.len() + 4 * t.data.len()
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_tensor_len(t));
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.push(t.dims.len() as u8);
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Cursor over a byte buffer that reports truncation with the total size
/// that would have been required.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated {
            needed: usize::MAX,
            found: self.buf.len(),
        })?;
        if end > self.buf.len() {
            return Err(Error::Truncated {
                needed: end,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(Error::TrailingBytes(extra)),
        }
    }
}

fn check_magic(found: [u8; 4], expected: [u8; 4]) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(buf);
    check_magic(r.array()?, TENSOR_MAGIC)?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let ndim = r.u8()? as usize;
    let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let len = element_count(&dims).ok_or_else(|| Error::DimMismatch {
        dims: dims.clone(),
        len: 0,
    })?;
    let payload = r.take(len.checked_mul(4).ok_or(Error::Truncated {
        needed: usize::MAX,
        found: buf.len(),
    })?)?;
    r.finish()?;

    let mut data = Vec::with_capacity(len);
    for (index, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
        data.push(v);
    }
    Tensor::new(dims, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

/// One column of a quantized layer as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedColumn {
    pub zero_point: i32,
    pub scale: f64,
    /// Offsets `k = q - z`, one per row.
    pub codes: Vec<u8>,
}

impl QuantizedColumn {
    /// Reconstructs `c * (k + z)` for every row.
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&k| self.scale * (k as i64 + self.zero_point as i64) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrixFile {
    pub bits: u8,
    pub n_rows: u64,
    pub n_cols: u64,
    pub columns: Vec<QuantizedColumn>,
}

impl QuantizedMatrixFile {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::UnsupportedBits(self.bits));
        }
        if self.columns.len() as u64 != self.n_cols {
            return Err(Error::Shape(format!(
                "{} columns stored, header says {}",
                self.columns.len(),
                self.n_cols
            )));
        }
        let max = (1u32 << self.bits) - 1;
        for (col, c) in self.columns.iter().enumerate() {
            if c.codes.len() as u64 != self.n_rows {
                return Err(Error::Shape(format!(
                    "column {col} has {} codes, header says {} rows",
                    c.codes.len(),
                    self.n_rows
                )));
            }
            if !c.scale.is_finite() {
                return Err(Error::NonFinite { index: col });
            }
            if let Some((row, &k)) = c.codes.iter().enumerate().find(|(_, &k)| k as u32 > max) {
                return Err(Error::CodeOutOfRange {
                    col,
                    row,
                    code: k as u32,
                    max,
                });
            }
        }
        Ok(())
    }

    pub fn packed_column_len(&self) -> usize {
        packed_len(self.n_rows as usize, self.bits)
    }

    pub fn encoded_len(&self) -> usize {
        QUANT_HEADER_LEN + self.columns.len() * (4 + 8 + self.packed_column_len())
    }
}

pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Packs `bits`-wide codes into a little-endian bit stream.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut bit = 0usize;
    for &k in codes {
        for j in 0..bits as usize {
            if (k >> j) & 1 == 1 {
                out[(bit + j) / 8] |= 1 << ((bit + j) % 8);
            }
        }
        bit += bits as usize;
    }
    out
}

pub fn unpack_codes(packed: &[u8], bits: u8, n: usize) -> Vec<u8> {
    let mut codes = Vec::with_capacity(n);
    let mut bit = 0usize;
    for _ in 0..n {
        let mut k = 0u8;
        for j in 0..bits as usize {
            let b = bit + j;
            if (packed[b / 8] >> (b % 8)) & 1 == 1 {
                k |= 1 << j;
            }
        }
        codes.push(k);
        bit += bits as usize;
    }
    codes
}

pub fn encode_quantized(qm: &QuantizedMatrixFile) -> Result<Vec<u8>> {
    qm.validate()?;
    let mut out = Vec::with_capacity(qm.encoded_len());
    out.extend_from_slice(&QUANT_MAGIC);
    out.push(QUANT_VERSION);
    out.push(qm.bits);
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&qm.n_rows.to_le_bytes());
    out.extend_from_slice(&qm.n_cols.to_le_bytes());
    for c in &qm.columns {
        out.extend_from_slice(&c.zero_point.to_le_bytes());
        out.extend_from_slice(&c.scale.to_le_bytes());
        out.extend_from_slice(&pack_codes(&c.codes, qm.bits));
    }
    Ok(out)
}

pub fn decode_quantized(buf: &[u8]) -> Result<QuantizedMatrixFile> {
    let mut r = Reader::new(buf);
    check_magic(r.array()?, QUANT_MAGIC)?;
    let version = r.u8()?;
    if version != QUANT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let bits = r.u8()?;
    if !(1..=8).contains(&bits) {
        return Err(Error::UnsupportedBits(bits));
    }
    let _reserved = r.u32()?;
    let n_rows = r.u64()?;
    let n_cols = r.u64()?;
    let rows = usize::try_from(n_rows).map_err(|_| Error::Shape("row count overflow".into()))?;
    let plen = packed_len(rows, bits);
    let mut columns = Vec::new();
    for _ in 0..n_cols {
        let zero_point = r.i32()?;
        let scale = r.f64()?;
        let codes = unpack_codes(r.take(plen)?, bits, rows);
        columns.push(QuantizedColumn {
            zero_point,
            scale,
            codes,
        });
    }
    r.finish()?;
    let qm = QuantizedMatrixFile {
        bits,
        n_rows,
        n_cols,
        columns,
    };
    qm.validate()?;
    Ok(qm)
}

pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedMatrixFile> {
    decode_quantized(&fs::read(path)?)
}

pub fn write_quantized(path: impl AsRef<Path>, qm: &QuantizedMatrixFile) -> Result<()> {
    fs::write(path, encode_quantized(qm)?)?;
    Ok(())
}
