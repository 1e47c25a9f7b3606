//! Dense matrices, seeded random streams and the `QDT1` tensor container.
//!
//! `QDT1` layout (all integers little-endian, no padding):
//!
//! ```text
//! magic   4 bytes  "QDT1"
//! dtype   u8       0 = f32, 1 = f64, 2 = u32
//! ndim    u32
//! dims    ndim x u64
//! payload product(dims) x dtype width
//! ```

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"QDT1";

/// Row-major `rows x cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Standard normal entries multiplied by `scale`.
    pub fn gaussian(rows: usize, cols: usize, scale: f32, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gaussian() as f32 * scale)
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Copy of the columns in `range`.
    pub fn column_block(&self, range: Range<usize>) -> Result<DenseMatrix> {
        if range.start > range.end || range.end > self.cols {
            return Err(Error::shape(format!(
                "column range {range:?} outside 0..{}",
                self.cols
            )));
        }
        let width = range.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[range.clone()]);
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Writes `block` into the columns starting at `col_start`.
    pub fn set_column_block(&mut self, col_start: usize, block: &DenseMatrix) -> Result<()> {
        if block.rows != self.rows || col_start + block.cols > self.cols {
            return Err(Error::shape(format!(
                "block {}x{} at column {col_start} does not fit {}x{}",
                block.rows, block.cols, self.rows, self.cols
            )));
        }
        for i in 0..self.rows {
            self.row_mut(i)[col_start..col_start + block.cols].copy_from_slice(block.row(i));
        }
        Ok(())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.get(i, j);
            }
        }
        out
    }

    /// `self * rhs` with `f32` accumulation in a fixed order.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same_shape(rhs)?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scaled(&self, c: f32) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Squared Frobenius norm, accumulated in `f64`.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn check_same_shape(&self, rhs: &DenseMatrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        check_finite(self.data.iter().map(|&v| v as f64))
    }
}

fn check_finite(values: impl Iterator<Item = f64>) -> Result<()> {
    for (index, v) in values.enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
    }
    Ok(())
}

/// Deterministic random stream keyed by `(seed, stream)`.
///
/// Backed by the ChaCha8 counter-mode generator; distinct stream ids select
/// disjoint keystreams of the same seed, so streams never interact.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh generator with the same seed on another stream.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(self.seed, stream)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Standard normal draw.
    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u32) -> u32 {
        self.inner.random_range(0..n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U32 = 2,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U32),
            other => Err(Error::BadDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An n-dimensional tensor as stored in a `QDT1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let expected: u64 = dims.iter().product();
        if expected != data.len() as u64 {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Row-major token id matrix of shape `(rows, cols)`.
    pub fn tokens(rows: usize, cols: usize, ids: Vec<u32>) -> Result<Self> {
        Tensor::new(vec![rows as u64, cols as u64], TensorData::U32(ids))
    }

    pub fn f64_matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows as u64, cols as u64], TensorData::F64(data))
    }

    fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r as usize, *c as usize)),
            other => Err(Error::shape(format!("expected 2 dims, found {other:?}"))),
        }
    }

    pub fn into_matrix(self) -> Result<DenseMatrix> {
        let (rows, cols) = self.matrix_dims()?;
        match self.data {
            TensorData::F32(v) => DenseMatrix::new(rows, cols, v),
            other => Err(Error::shape(format!(
                "expected f32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    /// Returns `(rows, cols, ids)` of a 2-d u32 tensor.
    pub fn into_tokens(self) -> Result<(usize, usize, Vec<u32>)> {
        let (rows, cols) = self.matrix_dims()?;
        match self.data {
            TensorData::U32(v) => Ok((rows, cols, v)),
            other => Err(Error::shape(format!(
                "expected u32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_f64_matrix(self) -> Result<(usize, usize, Vec<f64>)> {
        let (rows, cols) = self.matrix_dims()?;
        match self.data {
            TensorData::F64(v) => Ok((rows, cols, v)),
            other => Err(Error::shape(format!(
                "expected f64 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    fn check_finite(&self) -> Result<()> {
        match &self.data {
            TensorData::F32(v) => check_finite(v.iter().map(|&x| x as f64)),
            TensorData::F64(v) => check_finite(v.iter().copied()),
            TensorData::U32(_) => Ok(()),
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + 1 + 4 + 8 * self.dims.len() + self.data.len() * self.data.dtype().width()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.check_finite()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&TENSOR_MAGIC);
        out.push(self.data.dtype() as u8);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteReader::new(bytes);
        let magic: [u8; 4] = cur.array()?;
        if magic != TENSOR_MAGIC {
            return Err(Error::BadMagic {
                expected: TENSOR_MAGIC,
                found: magic,
            });
        }
        let dtype = DType::from_code(cur.u8()?)?;
        let ndim = cur.u32()? as usize;
        let dims = (0..ndim).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corrupt("dimension product overflows".into()))?;
        let needed = count
            .checked_mul(dtype.width() as u64)
            .ok_or_else(|| Error::Corrupt("payload size overflows".into()))?;
        let remaining = cur.remaining() as u64;
        if remaining < needed {
            return Err(Error::Truncated {
                needed,
                found: remaining,
            });
        }
        if remaining > needed {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after payload",
                remaining - needed
            )));
        }
        let payload = cur.take(needed as usize)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => TensorData::U32(
                payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        let tensor = Tensor { dims, data };
        tensor.check_finite()?;
        Ok(tensor)
    }
}

impl From<DenseMatrix> for Tensor {
    fn from(m: DenseMatrix) -> Self {
        Tensor {
            dims: vec![m.rows as u64, m.cols as u64],
            data: TensorData::F32(m.data),
        }
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    write_tensor(path, &Tensor::from(m.clone()))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    read_tensor(path)?.into_matrix()
}

/// Little-endian cursor shared by the binary decoders.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                needed: n as u64,
                found: self.remaining() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
