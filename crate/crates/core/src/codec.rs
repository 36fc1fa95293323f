//! Byte-exact serialization of parameter sets and communication accounting.
//!
//! Blob layout, all integers little-endian and floats IEEE-754 `f32`:
//!
//! ```text
//! "ESMB" | version u8 | format u8 (0 dense, 1 csr) | layer count u16
//! per layer:
//!   id_len u8 | id bytes | rank u8 | dims u32 x rank | bias_len u32
//!   dense: weights f32 x numel | bias f32 x bias_len
//!   csr:   nnz u32 | row_ptr u32 x (rows + 1) | col_idx u32 x nnz
//!          | values f32 x nnz | bias f32 x bias_len
//! ```
//!
//! Weight tensors are viewed as `dims[0] x product(dims[1..])` matrices.

use std::fmt;

use thiserror::Error;

use crate::model::{LayerParams, ParameterSet};
use crate::tensor::Tensor;

pub const BLOB_MAGIC: &[u8; 4] = b"ESMB";
pub const BLOB_VERSION: u8 = 1;
/// Magic, version, format and layer count.
pub const BLOB_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum WireFormat {
    Dense = 0,
    Csr = 1,
}

impl WireFormat {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(WireFormat::Dense),
            1 => Some(WireFormat::Csr),
            _ => None,
        }
    }
}

impl fmt::Display for WireFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WireFormat::Dense => "dense",
            WireFormat::Csr => "csr",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("blob truncated at byte {0}")]
    Truncated(usize),
    #[error("bad blob magic")]
    BadMagic,
    #[error("unsupported blob version {0}")]
    Version(u8),
    #[error("unknown payload format {0}")]
    Format(u8),
    #[error("{0} trailing bytes after the last layer")]
    TrailingBytes(usize),
    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },
    #[error("layer {layer}: row_ptr[0] must be 0")]
    RowPtrStart { layer: usize },
    #[error("layer {layer}: row_ptr decreases at row {row}")]
    RowPtrDecreasing { layer: usize, row: usize },
    #[error("layer {layer}: row_ptr ends at {end} but nnz is {nnz}")]
    RowPtrEnd { layer: usize, end: u32, nnz: usize },
    #[error("layer {layer}: column {col} out of range for {cols} columns")]
    ColumnOutOfRange { layer: usize, col: u32, cols: usize },
    #[error("layer {layer}: column indices not strictly increasing in row {row}")]
    ColumnOrder { layer: usize, row: usize },
    #[error("layer {layer}: non-finite value")]
    NonFinite { layer: usize },
}

/// Compressed sparse row matrix with 32-bit indices and `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f32>,
}

impl CsrMatrix {
    /// Compress a row-major matrix, storing every entry that is non-zero
    /// after rounding to `f32`.
    pub fn from_dense(rows: usize, cols: usize, data: &[f64]) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in data.chunks_exact(cols) {
            for (c, &v) in row.iter().enumerate() {
                let v = v as f32;
                if v != 0.0 {
                    col_idx.push(c as u32);
                    values.push(v);
                }
            }
            row_ptr.push(values.len() as u32);
        }
        Self { rows, cols, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    fn validate(&self, layer: usize) -> Result<(), DecodeError> {
        let nnz = self.values.len();
        if self.row_ptr.len() != self.rows + 1 || self.col_idx.len() != nnz {
            return Err(DecodeError::Layer {
                layer,
                msg: "index array lengths disagree with the matrix shape".into(),
            });
        }
        if self.row_ptr[0] != 0 {
            return Err(DecodeError::RowPtrStart { layer });
        }
        for row in 0..self.rows {
            if self.row_ptr[row + 1] < self.row_ptr[row] {
                return Err(DecodeError::RowPtrDecreasing { layer, row });
            }
        }
        let end = self.row_ptr[self.rows];
        if end as usize != nnz {
            return Err(DecodeError::RowPtrEnd { layer, end, nnz });
        }
        for row in 0..self.rows {
            let cols = &self.col_idx[self.row_ptr[row] as usize..self.row_ptr[row + 1] as usize];
            for (i, &c) in cols.iter().enumerate() {
                if c as usize >= self.cols {
                    return Err(DecodeError::ColumnOutOfRange { layer, col: c, cols: self.cols });
                }
                if i > 0 && cols[i - 1] >= c {
                    return Err(DecodeError::ColumnOrder { layer, row });
                }
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(DecodeError::NonFinite { layer });
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for row in 0..self.rows {
            for k in self.row_ptr[row] as usize..self.row_ptr[row + 1] as usize {
                out[row * self.cols + self.col_idx[k] as usize] = self.values[k] as f64;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrLayer {
    pub id: String,
    pub shape: Vec<usize>,
    pub matrix: CsrMatrix,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrBlob {
    pub layers: Vec<CsrLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub id: String,
    pub shape: Vec<usize>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlob {
    pub layers: Vec<DenseLayer>,
}

fn f32s(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

pub fn csr_encode(params: &ParameterSet) -> CsrBlob {
    CsrBlob {
        layers: params
            .layers()
            .iter()
            .map(|l| {
                let (rows, cols) = l.weight.matrix_dims();
                CsrLayer {
                    id: l.id.clone(),
                    shape: l.weight.shape().to_vec(),
                    matrix: CsrMatrix::from_dense(rows, cols, l.weight.data()),
                    bias: f32s(l.bias.data()),
                }
            })
            .collect(),
    }
}

pub fn csr_decode(blob: &CsrBlob) -> Result<ParameterSet, DecodeError> {
    let mut layers = Vec::with_capacity(blob.layers.len());
    for (i, l) in blob.layers.iter().enumerate() {
        check_shape(i, &l.shape)?;
        let numel: usize = l.shape.iter().product();
        if l.matrix.rows != l.shape[0] || l.matrix.rows * l.matrix.cols != numel {
            return Err(DecodeError::Layer {
                layer: i,
                msg: format!("{}x{} matrix does not view shape {:?}", l.matrix.rows, l.matrix.cols, l.shape),
            });
        }
        l.matrix.validate(i)?;
        layers.push(build_layer(i, &l.id, l.shape.clone(), l.matrix.to_dense(), &l.bias)?);
    }
    ParameterSet::new(layers).map_err(|e| DecodeError::Layer { layer: 0, msg: e.to_string() })
}

pub fn dense_encode(params: &ParameterSet) -> DenseBlob {
    DenseBlob {
        layers: params
            .layers()
            .iter()
            .map(|l| DenseLayer {
                id: l.id.clone(),
                shape: l.weight.shape().to_vec(),
                weight: f32s(l.weight.data()),
                bias: f32s(l.bias.data()),
            })
            .collect(),
    }
}

pub fn dense_decode(blob: &DenseBlob) -> Result<ParameterSet, DecodeError> {
    let mut layers = Vec::with_capacity(blob.layers.len());
    for (i, l) in blob.layers.iter().enumerate() {
        check_shape(i, &l.shape)?;
        if l.weight.len() != l.shape.iter().product::<usize>() {
            return Err(DecodeError::Layer { layer: i, msg: "weight length does not match shape".into() });
        }
        if l.weight.iter().any(|v| !v.is_finite()) {
            return Err(DecodeError::NonFinite { layer: i });
        }
        let w = l.weight.iter().map(|&v| v as f64).collect();
        layers.push(build_layer(i, &l.id, l.shape.clone(), w, &l.bias)?);
    }
    ParameterSet::new(layers).map_err(|e| DecodeError::Layer { layer: 0, msg: e.to_string() })
}

fn check_shape(layer: usize, shape: &[usize]) -> Result<(), DecodeError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(DecodeError::Layer { layer, msg: format!("invalid shape {shape:?}") });
    }
    Ok(())
}

fn build_layer(
    layer: usize,
    id: &str,
    shape: Vec<usize>,
    weight: Vec<f64>,
    bias: &[f32],
) -> Result<LayerParams, DecodeError> {
    if bias.is_empty() || bias.iter().any(|v| !v.is_finite()) {
        return Err(DecodeError::Layer { layer, msg: "bias must be non-empty and finite".into() });
    }
    let err = |e: crate::tensor::TensorError| DecodeError::Layer { layer, msg: e.to_string() };
    Ok(LayerParams {
        id: id.to_string(),
        weight: Tensor::new(shape, weight).map_err(err)?,
        bias: Tensor::new(vec![bias.len()], bias.iter().map(|&v| v as f64).collect()).map_err(err)?,
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn header(format: WireFormat, layers: usize, capacity: usize) -> Self {
        let mut w = Writer(Vec::with_capacity(capacity));
        w.0.extend_from_slice(BLOB_MAGIC);
        w.0.push(BLOB_VERSION);
        w.0.push(format as u8);
        w.0.extend_from_slice(&(layers as u16).to_le_bytes());
        w
    }

    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u32s(&mut self, vs: &[u32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn layer_head(&mut self, id: &str, shape: &[usize], bias_len: usize) {
        self.0.push(id.len() as u8);
        self.0.extend_from_slice(id.as_bytes());
        self.0.push(shape.len() as u8);
        for &d in shape {
            self.u32(d);
        }
        self.u32(bias_len);
    }
}

impl CsrBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let size = BLOB_HEADER_LEN
            + self
                .layers
                .iter()
                .map(|l| csr_layer_size(&l.id, &l.shape, l.bias.len(), l.matrix.nnz()))
                .sum::<usize>();
        let mut w = Writer::header(WireFormat::Csr, self.layers.len(), size);
        for l in &self.layers {
            w.layer_head(&l.id, &l.shape, l.bias.len());
            w.u32(l.matrix.nnz());
            w.u32s(&l.matrix.row_ptr);
            w.u32s(&l.matrix.col_idx);
            w.f32s(&l.matrix.values);
            w.f32s(&l.bias);
        }
        debug_assert_eq!(w.0.len(), size);
        w.0
    }
}

impl DenseBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let size = BLOB_HEADER_LEN
            + self.layers.iter().map(|l| dense_layer_size(&l.id, &l.shape, l.bias.len())).sum::<usize>();
        let mut w = Writer::header(WireFormat::Dense, self.layers.len(), size);
        for l in &self.layers {
            w.layer_head(&l.id, &l.shape, l.bias.len());
            w.f32s(&l.weight);
            w.f32s(&l.bias);
        }
        debug_assert_eq!(w.0.len(), size);
        w.0
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(DecodeError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, DecodeError> {
        let raw = self.take(n.checked_mul(4).ok_or(DecodeError::Truncated(self.pos))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DecodeError> {
        let raw = self.take(n.checked_mul(4).ok_or(DecodeError::Truncated(self.pos))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn layer_head(&mut self, layer: usize) -> Result<(String, Vec<usize>, usize), DecodeError> {
        let id_len = self.u8()? as usize;
        let id = String::from_utf8(self.take(id_len)?.to_vec())
            .map_err(|_| DecodeError::Layer { layer, msg: "layer id is not UTF-8".into() })?;
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        check_shape(layer, &shape)?;
        let bias_len = self.u32()? as usize;
        Ok((id, shape, bias_len))
    }

    fn finish(&self) -> Result<(), DecodeError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

fn read_header(bytes: &[u8]) -> Result<(WireFormat, usize, Reader<'_>), DecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != BLOB_MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = r.u8()?;
    if version != BLOB_VERSION {
        return Err(DecodeError::Version(version));
    }
    let fmt_byte = r.u8()?;
    let format = WireFormat::from_byte(fmt_byte).ok_or(DecodeError::Format(fmt_byte))?;
    let count = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
    Ok((format, count, r))
}

/// Payload format of a blob, read from its header.
pub fn peek_format(bytes: &[u8]) -> Result<WireFormat, DecodeError> {
    read_header(bytes).map(|(f, _, _)| f)
}

impl CsrBlob {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let (format, count, mut r) = read_header(bytes)?;
        if format != WireFormat::Csr {
            return Err(DecodeError::Format(format as u8));
        }
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let (id, shape, bias_len) = r.layer_head(i)?;
            let rows = shape[0];
            let cols = shape[1..].iter().product();
            let nnz = r.u32()? as usize;
            let row_ptr = r.u32s(rows + 1)?;
            let col_idx = r.u32s(nnz)?;
            let values = r.f32s(nnz)?;
            let bias = r.f32s(bias_len)?;
            let matrix = CsrMatrix { rows, cols, row_ptr, col_idx, values };
            matrix.validate(i)?;
            layers.push(CsrLayer { id, shape, matrix, bias });
        }
        r.finish()?;
        Ok(Self { layers })
    }
}

impl DenseBlob {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let (format, count, mut r) = read_header(bytes)?;
        if format != WireFormat::Dense {
            return Err(DecodeError::Format(format as u8));
        }
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let (id, shape, bias_len) = r.layer_head(i)?;
            let weight = r.f32s(shape.iter().product())?;
            let bias = r.f32s(bias_len)?;
            layers.push(DenseLayer { id, shape, weight, bias });
        }
        r.finish()?;
        Ok(Self { layers })
    }
}

pub fn encode(params: &ParameterSet, format: WireFormat) -> Vec<u8> {
    match format {
        WireFormat::Dense => dense_encode(params).to_bytes(),
        WireFormat::Csr => csr_encode(params).to_bytes(),
    }
}

/// Decode either blob format.
pub fn decode(bytes: &[u8]) -> Result<ParameterSet, DecodeError> {
    match peek_format(bytes)? {
        WireFormat::Dense => dense_decode(&DenseBlob::from_bytes(bytes)?),
        WireFormat::Csr => csr_decode(&CsrBlob::from_bytes(bytes)?),
    }
}

fn layer_head_size(id: &str, shape: &[usize]) -> usize {
    1 + id.len() + 1 + 4 * shape.len() + 4
}

fn dense_layer_size(id: &str, shape: &[usize], bias_len: usize) -> usize {
    layer_head_size(id, shape) + 4 * shape.iter().product::<usize>() + 4 * bias_len
}

fn csr_layer_size(id: &str, shape: &[usize], bias_len: usize, nnz: usize) -> usize {
    layer_head_size(id, shape) + 4 + 4 * nnz + 4 * nnz + 4 * (shape[0] + 1) + 4 * bias_len
}

/// Fixed bytes that do not scale with values: blob header plus per-layer
/// descriptors (and the `nnz` field in CSR).
pub fn header_size(params: &ParameterSet, format: WireFormat) -> usize {
    let per_nnz = match format {
        WireFormat::Dense => 0,
        WireFormat::Csr => 4,
    };
    BLOB_HEADER_LEN
        + params.layers().iter().map(|l| layer_head_size(&l.id, l.weight.shape()) + per_nnz).sum::<usize>()
}

/// Exact encoded byte length, computed without encoding.
///
/// Dense: `4 * params + header`. CSR: per layer `4 nnz` values, `4 nnz`
/// column indices and `4 (rows + 1)` row pointers, plus dense biases and
/// the header. `nnz` counts entries that stay non-zero in `f32`.
pub fn encoded_size(params: &ParameterSet, format: WireFormat) -> usize {
    let payload: usize = match format {
        WireFormat::Dense => 4 * params.num_params(),
        WireFormat::Csr => params
            .layers()
            .iter()
            .map(|l| {
                let nnz = l.weight.data().iter().filter(|&&v| v as f32 != 0.0).count();
                4 * nnz + 4 * nnz + 4 * (l.weight.shape()[0] + 1) + 4 * l.bias.len()
            })
            .sum(),
    };
    header_size(params, format) + payload
}

/// Bytes moved in one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundVolume {
    pub uploaded: u64,
    pub downloaded: u64,
}

impl RoundVolume {
    pub fn total(&self) -> u64 {
        self.uploaded + self.downloaded
    }
}

/// Sum of client uploads plus one download of the global model per client.
pub fn account_round(uploads: &[u64], download_size: u64, num_clients: usize) -> RoundVolume {
    RoundVolume { uploaded: uploads.iter().sum(), downloaded: download_size * num_clients as u64 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerEntry {
    pub round: usize,
    pub pruning_phase: bool,
    pub actual: RoundVolume,
    /// What the same round would have moved with dense uploads.
    pub dense_equivalent: RoundVolume,
}

/// Per-experiment communication ledger.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total(&self) -> RoundVolume {
        self.sum(|_| true, |e| e.actual)
    }

    /// `(sparse, dense)` byte totals over the pruning phase.
    pub fn pruning_phase_totals(&self) -> (u64, u64) {
        (
            self.sum(|e| e.pruning_phase, |e| e.actual).total(),
            self.sum(|e| e.pruning_phase, |e| e.dense_equivalent).total(),
        )
    }

    /// `1 - sparse/dense` over the pruning phase, in percent; zero when the
    /// run has no pruning phase.
    pub fn saving_percent(&self) -> f64 {
        saving_percent(self.pruning_phase_totals())
    }

    fn sum(
        &self,
        filter: impl Fn(&LedgerEntry) -> bool,
        pick: impl Fn(&LedgerEntry) -> RoundVolume,
    ) -> RoundVolume {
        self.entries.iter().filter(|e| filter(e)).map(pick).fold(RoundVolume::default(), |acc, v| {
            RoundVolume { uploaded: acc.uploaded + v.uploaded, downloaded: acc.downloaded + v.downloaded }
        })
    }
}

pub fn saving_percent((sparse, dense): (u64, u64)) -> f64 {
    if dense == 0 {
        0.0
    } else {
        100.0 * (1.0 - sparse as f64 / dense as f64)
    }
}
