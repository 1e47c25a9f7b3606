//! `QPK1` packed storage for quantized layers, dequantization, a reference
//! bitplane mat-vec and the memory estimator.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! file   "QPK1" | u32 layer_count | layer*
//! layer  u32 name_len | name (utf-8) | u64 rows | u64 cols | u64 group_width
//!        | u8 has_row_mean | rows x f16 row_mean (if present)
//!        | u32 group_count | group*
//! group  u8 order | order x ( rows x f16 alpha_r | width x f16 alpha_c
//!        | ceil(rows*width/64) x u64 bitplane )
//! ```
//!
//! Bitplanes are row-major, LSB-first within each word, bit 1 = `+1`;
//! trailing pad bits are zero.

use std::fs;
use std::path::Path;

use half::f16;

use crate::daq::{QuantizedLayer, SignMatrix, MAX_ORDER};
use crate::error::{Error, Result};
use crate::tensor::{ByteReader, DenseMatrix};

pub const QPK_MAGIC: [u8; 4] = *b"QPK1";
const FILE_HEADER_BYTES: u64 = 8;

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

pub fn pack(signs: &SignMatrix) -> Vec<u64> {
    let mut words = vec![0u64; words_for(signs.data().len())];
    for (idx, &s) in signs.data().iter().enumerate() {
        if s > 0 {
            words[idx / 64] |= 1 << (idx % 64);
        }
    }
    words
}

pub fn unpack(words: &[u64], rows: usize, cols: usize) -> Result<SignMatrix> {
    let bits = rows * cols;
    if words.len() != words_for(bits) {
        return Err(Error::Corrupt(format!(
            "{} words cannot hold a {rows}x{cols} bitplane",
            words.len()
        )));
    }
    if bits % 64 != 0 {
        let last = words[words.len() - 1];
        if last >> (bits % 64) != 0 {
            return Err(Error::Corrupt("non-zero pad bits in bitplane".into()));
        }
    }
    let data = (0..bits)
        .map(|idx| if words[idx / 64] >> (idx % 64) & 1 == 1 { 1 } else { -1 })
        .collect();
    SignMatrix::new(rows, cols, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedGroup {
    pub rows: usize,
    pub cols: usize,
    pub planes: Vec<Vec<u64>>,
    pub alpha_r: Vec<Vec<f16>>,
    pub alpha_c: Vec<Vec<f16>>,
}

impl PackedGroup {
    pub fn order(&self) -> usize {
        self.planes.len()
    }
}

fn to_f16(values: &[f32]) -> Result<Vec<f16>> {
    values
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            let h = f16::from_f32(v);
            if h.is_finite() {
                Ok(h)
            } else {
                Err(Error::NonFinite { index })
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpkLayer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group_width: usize,
    pub row_mean: Option<Vec<f16>>,
    pub groups: Vec<PackedGroup>,
}

impl QpkLayer {
    pub fn from_quantized(name: &str, layer: &QuantizedLayer) -> Result<Self> {
        let groups = layer
            .groups
            .iter()
            .map(|g| {
                let (rows, cols) = g.shape();
                Ok(PackedGroup {
                    rows,
                    cols,
                    planes: g.orders.iter().map(|o| pack(&o.signs)).collect(),
                    alpha_r: g.orders.iter().map(|o| to_f16(&o.alpha_r)).collect::<Result<_>>()?,
                    alpha_c: g.orders.iter().map(|o| to_f16(&o.alpha_c)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            rows: layer.rows,
            cols: layer.cols,
            group_width: layer.group_width,
            row_mean: layer.row_mean.as_deref().map(to_f16).transpose()?,
            groups,
        })
    }

    pub fn orders(&self) -> Vec<u8> {
        self.groups.iter().map(|g| g.order() as u8).collect()
    }

    pub fn describe(&self) -> LayerDesc {
        LayerDesc {
            name: self.name.clone(),
            rows: self.rows,
            cols: self.cols,
            group_width: self.group_width,
            orders: self.orders(),
            row_mean: self.row_mean.is_some(),
        }
    }

    fn group_widths(cols: usize, group_width: usize) -> Vec<usize> {
        (0..cols)
            .step_by(group_width.max(1))
            .map(|s| group_width.min(cols - s))
            .collect()
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        for v in [self.rows, self.cols, self.group_width] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.push(self.row_mean.is_some() as u8);
        if let Some(mu) = &self.row_mean {
            mu.iter().for_each(|h| out.extend_from_slice(&h.to_bits().to_le_bytes()));
        }
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            out.push(g.order() as u8);
            for k in 0..g.order() {
                g.alpha_r[k]
                    .iter()
                    .for_each(|h| out.extend_from_slice(&h.to_bits().to_le_bytes()));
                g.alpha_c[k]
                    .iter()
                    .for_each(|h| out.extend_from_slice(&h.to_bits().to_le_bytes()));
                g.planes[k].iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
            }
        }
    }

    fn decode_from(cur: &mut ByteReader) -> Result<Self> {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Corrupt("layer name is not utf-8".into()))?;
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let group_width = cur.u64()? as usize;
        if rows == 0 || cols == 0 || group_width == 0 {
            return Err(Error::Corrupt(format!("layer {name}: zero dimension")));
        }
        let read_f16s = |cur: &mut ByteReader, n: usize| -> Result<Vec<f16>> {
            (0..n)
                .map(|_| {
                    let h = f16::from_bits(cur.u16()?);
                    if h.is_finite() {
                        Ok(h)
                    } else {
                        Err(Error::Corrupt(format!("layer {name}: non-finite scale")))
                    }
                })
                .collect()
        };
        let row_mean = match cur.u8()? {
            0 => None,
            1 => Some(read_f16s(cur, rows)?),
            f => return Err(Error::Corrupt(format!("layer {name}: bad row-mean flag {f}"))),
        };
        let widths = Self::group_widths(cols, group_width);
        let group_count = cur.u32()? as usize;
        if group_count != widths.len() {
            return Err(Error::Corrupt(format!(
                "layer {name}: {group_count} groups, expected {}",
                widths.len()
            )));
        }
        let mut groups = Vec::with_capacity(group_count);
        for &gw in &widths {
            let order = cur.u8()? as usize;
            if !(1..=MAX_ORDER).contains(&order) {
                return Err(Error::Corrupt(format!("layer {name}: order {order}")));
            }
            let mut g = PackedGroup {
                rows,
                cols: gw,
                planes: Vec::with_capacity(order),
                alpha_r: Vec::with_capacity(order),
                alpha_c: Vec::with_capacity(order),
            };
            for _ in 0..order {
                g.alpha_r.push(read_f16s(cur, rows)?);
                g.alpha_c.push(read_f16s(cur, gw)?);
                let words = (0..words_for(rows * gw))
                    .map(|_| cur.u64())
                    .collect::<Result<Vec<_>>>()?;
                // validates pad bits
                unpack(&words, rows, gw)?;
                g.planes.push(words);
            }
            groups.push(g);
        }
        Ok(Self {
            name,
            rows,
            cols,
            group_width,
            row_mean,
            groups,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QpkFile {
    pub layers: Vec<QpkLayer>,
}

impl QpkFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&QPK_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            l.encode_into(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteReader::new(bytes);
        let magic: [u8; 4] = cur.array()?;
        if magic != QPK_MAGIC {
            return Err(Error::BadMagic {
                expected: QPK_MAGIC,
                found: magic,
            });
        }
        let count = cur.u32()? as usize;
        let layers = (0..count)
            .map(|_| QpkLayer::decode_from(&mut cur))
            .collect::<Result<Vec<_>>>()?;
        if cur.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes", cur.remaining())));
        }
        Ok(Self { layers })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn layer(&self, name: &str) -> Option<&QpkLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn describe(&self, fp16_params: u64) -> ModelDescription {
        ModelDescription {
            layers: self.layers.iter().map(QpkLayer::describe).collect(),
            fp16_params,
        }
    }
}

/// `W_ij = mu_i + sum_k alpha_r[k][i] alpha_c[k][j] B_k[i][j]` with scales
/// widened from half precision.
pub fn dequantize(layer: &QpkLayer) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(layer.rows, layer.cols);
    let mut col0 = 0;
    for g in &layer.groups {
        for k in 0..g.order() {
            let signs = unpack(&g.planes[k], g.rows, g.cols)?;
            for i in 0..g.rows {
                let r = g.alpha_r[k][i].to_f32();
                let row = &mut out.row_mut(i)[col0..col0 + g.cols];
                for (j, v) in row.iter_mut().enumerate() {
                    *v += r * g.alpha_c[k][j].to_f32() * signs.get(i, j) as f32;
                }
            }
        }
        col0 += g.cols;
    }
    if col0 != layer.cols {
        return Err(Error::Corrupt(format!("groups cover {col0} of {} columns", layer.cols)));
    }
    if let Some(mu) = &layer.row_mean {
        for (i, m) in mu.iter().enumerate() {
            let m = m.to_f32();
            out.row_mut(i).iter_mut().for_each(|v| *v += m);
        }
    }
    Ok(out)
}

/// `y = W x` straight from the bitplanes: per order and group,
/// `y_i += alpha_r_i * (2 * sum_{B_ij = +1} v_j - sum_j v_j)` with
/// `v_j = alpha_c_j x_j`.
pub fn rc_matvec(layer: &QpkLayer, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != layer.cols {
        return Err(Error::shape(format!(
            "vector has {} entries, layer has {} columns",
            x.len(),
            layer.cols
        )));
    }
    let mut y = vec![0.0f64; layer.rows];
    let mut col0 = 0;
    for g in &layer.groups {
        let xs = &x[col0..col0 + g.cols];
        for k in 0..g.order() {
            let v: Vec<f64> = xs
                .iter()
                .zip(&g.alpha_c[k])
                .map(|(&x, c)| c.to_f64() * x as f64)
                .collect();
            let total: f64 = v.iter().sum();
            let plane = &g.planes[k];
            for (i, yi) in y.iter_mut().enumerate() {
                let start = i * g.cols;
                let end = start + g.cols;
                let mut pos = 0.0;
                let mut w = start / 64;
                while w * 64 < end {
                    let lo = (w * 64).max(start);
                    let hi = ((w + 1) * 64).min(end);
                    let mut bits = plane[w] >> (lo % 64);
                    let span = hi - lo;
                    if span < 64 {
                        bits &= (1u64 << span) - 1;
                    }
                    while bits != 0 {
                        let b = bits.trailing_zeros() as usize;
                        pos += v[lo + b - start];
                        bits &= bits - 1;
                    }
                    w += 1;
                }
                *yi += g.alpha_r[k][i].to_f64() * (2.0 * pos - total);
            }
        }
        col0 += g.cols;
    }
    if let Some(mu) = &layer.row_mean {
        let sx: f64 = x.iter().map(|&v| v as f64).sum();
        for (yi, m) in y.iter_mut().zip(mu) {
            *yi += m.to_f64() * sx;
        }
    }
    Ok(y.into_iter().map(|v| v as f32).collect())
}

/// Shape and per-group orders of one quantized layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LayerDesc {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group_width: usize,
    pub orders: Vec<u8>,
    pub row_mean: bool,
}

impl LayerDesc {
    pub fn uniform(name: &str, rows: usize, cols: usize, group_width: usize, order: u8) -> Self {
        Self {
            name: name.to_string(),
            rows,
            cols,
            group_width,
            orders: vec![order; cols.div_ceil(group_width)],
            row_mean: true,
        }
    }

    /// Exact encoded size of this layer in a `QPK1` file.
    pub fn encoded_bytes(&self) -> u64 {
        let header = 4 + self.name.len() as u64 + 24 + 1 + 4;
        let mean = if self.row_mean { 2 * self.rows as u64 } else { 0 };
        let widths = QpkLayer::group_widths(self.cols, self.group_width);
        let groups: u64 = widths
            .iter()
            .zip(&self.orders)
            .map(|(&gw, &k)| {
                let per_order =
                    2 * (self.rows + gw) as u64 + 8 * words_for(self.rows * gw) as u64;
                1 + k as u64 * per_order
            })
            .sum();
        header + mean + groups
    }

    pub fn params(&self) -> u64 {
        (self.rows * self.cols) as u64
    }
}

/// Quantized layers plus the count of parameters kept in half precision.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ModelDescription {
    pub layers: Vec<LayerDesc>,
    pub fp16_params: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MemoryEstimate {
    /// Size of the `QPK1` container holding every quantized layer.
    pub quantized_bytes: u64,
    pub fp16_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryEstimate {
    /// Decimal gigabytes.
    pub fn gigabytes(&self) -> f64 {
        self.total_bytes as f64 / 1e9
    }
}

pub fn memory_estimate(desc: &ModelDescription) -> MemoryEstimate {
    let quantized_bytes = if desc.layers.is_empty() {
        0
    } else {
        FILE_HEADER_BYTES + desc.layers.iter().map(LayerDesc::encoded_bytes).sum::<u64>()
    };
    let fp16_bytes = 2 * desc.fp16_params;
    MemoryEstimate {
        quantized_bytes,
        fp16_bytes,
        total_bytes: quantized_bytes + fp16_bytes,
    }
}

/// Approximate shapes of an 8B masked diffusion LM with a 4096-wide
/// residual stream: 32 blocks of four 4096x4096 attention projections and a
/// gated MLP of width 12288, all quantized at a uniform average of 2 bits.
/// The 126464-token embedding and output head plus norms stay in half
/// precision.
pub fn llada_8b_like(group_width: usize) -> ModelDescription {
    const D: usize = 4096;
    const FFN: usize = 12288;
    const VOCAB: u64 = 126_464;
    const BLOCKS: usize = 32;
    let mut layers = Vec::new();
    for b in 0..BLOCKS {
        for p in ["q", "k", "v", "o"] {
            layers.push(LayerDesc::uniform(&format!("blocks.{b}.attn.{p}"), D, D, group_width, 2));
        }
        layers.push(LayerDesc::uniform(&format!("blocks.{b}.mlp.gate"), FFN, D, group_width, 2));
        layers.push(LayerDesc::uniform(&format!("blocks.{b}.mlp.up"), FFN, D, group_width, 2));
        layers.push(LayerDesc::uniform(&format!("blocks.{b}.mlp.down"), D, FFN, group_width, 2));
    }
    let norms = (2 * BLOCKS as u64 + 1) * D as u64;
    ModelDescription {
        layers,
        fp16_params: 2 * VOCAB * D as u64 + norms,
    }
}

/// Everything in half precision.
pub fn fp16_only(params: u64) -> ModelDescription {
    ModelDescription {
        layers: Vec::new(),
        fp16_params: params,
    }
}
