//! Checkpoint files and experiment report CSVs.
//!
//! Checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! "MXPN"  version:u32  header_len:u32  header JSON  tensor blobs...
//! ```
//!
//! The header describes every blob that follows, in order. A dense blob is
//! the raw f32 values; a sparse blob is CSR (`row_ptr: u32[rows+1]`,
//! `col_idx: u32[nnz]`, `values: f32[nnz]`). Weight tensors whose zero
//! fraction is at least one half are stored CSR, with conv filters flattened
//! to one row per filter. A pruned weight's mask bitmap (LSB-first) follows
//! its values. Zero is "bit pattern zero", so a negative zero survives a
//! round trip as an explicit entry.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, LayerSpec, LayerState, MaxoutState, Network, NetworkSpec, Params};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MXPN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Storage {
    Dense,
    Csr { nnz: u64 },
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    layer: usize,
    role: String,
    shape: Vec<usize>,
    storage: Storage,
    mask: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    input: (usize, usize, usize),
    maxout: Option<MaxoutState>,
    tensors: Vec<TensorMeta>,
}

/// Compressed sparse rows over a row-major dense matrix. `col_idx` is
/// strictly increasing within each row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrBlob {
    pub rows: u32,
    pub cols: u32,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f32>,
}

impl CsrBlob {
    /// Keep entries whose bit pattern is nonzero.
    pub fn from_dense(rows: usize, cols: usize, values: &[f32]) -> Result<CsrBlob> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                values.len()
            )));
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut kept = Vec::new();
        row_ptr.push(0u32);
        for r in 0..rows {
            for c in 0..cols {
                let v = values[r * cols + c];
                if v.to_bits() != 0 {
                    col_idx.push(c as u32);
                    kept.push(v);
                }
            }
            row_ptr.push(col_idx.len() as u32);
        }
        Ok(CsrBlob {
            rows: rows as u32,
            cols: cols as u32,
            row_ptr,
            col_idx,
            values: kept,
        })
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.row_ptr.len() != self.rows as usize + 1 {
            return Err(format!(
                "row_ptr holds {} entries, expected rows + 1 = {}",
                self.row_ptr.len(),
                self.rows + 1
            ));
        }
        if self.row_ptr[0] != 0 {
            return Err(format!("row_ptr must start at 0, got {}", self.row_ptr[0]));
        }
        if self.row_ptr.windows(2).any(|p| p[0] > p[1]) {
            return Err("row_ptr must be non-decreasing".into());
        }
        let nnz = *self.row_ptr.last().unwrap() as usize;
        if self.col_idx.len() != nnz || self.values.len() != nnz {
            return Err(format!(
                "row_ptr ends at {nnz} but col_idx/values hold {}/{} entries",
                self.col_idx.len(),
                self.values.len()
            ));
        }
        for r in 0..self.rows as usize {
            let row = &self.col_idx[self.row_ptr[r] as usize..self.row_ptr[r + 1] as usize];
            if row.windows(2).any(|p| p[0] >= p[1]) {
                return Err(format!("column indices not strictly increasing in row {r}"));
            }
            if row.last().is_some_and(|&c| c >= self.cols) {
                return Err(format!(
                    "column index {} out of range in row {r} (cols = {})",
                    row.last().unwrap(),
                    self.cols
                ));
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Result<Vec<f32>> {
        self.validate().map_err(Error::Structure)?;
        let mut out = vec![0.0f32; self.rows as usize * self.cols as usize];
        for r in 0..self.rows as usize {
            for i in self.row_ptr[r] as usize..self.row_ptr[r + 1] as usize {
                out[r * self.cols as usize + self.col_idx[i] as usize] = self.values[i];
            }
        }
        Ok(out)
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(buf: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_u32s(buf: &mut Vec<u8>, vs: &[u32]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_bitmap(buf: &mut Vec<u8>, bits: &[bool]) {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    buf.extend_from_slice(&bytes);
}

fn zero_fraction(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| v.to_bits() == 0).count() as f64 / values.len() as f64
}

fn encode_tensor(
    layer: usize,
    role: &str,
    tensor: &Tensor,
    mask: Option<&[bool]>,
    payload: &mut Vec<u8>,
) -> Result<TensorMeta> {
    let dims = tensor.shape().dims();
    let sparse_eligible = role == "weight" && dims.len() >= 2;
    let storage = if sparse_eligible && zero_fraction(tensor.data()) >= 0.5 {
        let rows = dims[0];
        let cols: usize = dims[1..].iter().product();
        let csr = CsrBlob::from_dense(rows, cols, tensor.data())?;
        push_u32s(payload, &csr.row_ptr);
        push_u32s(payload, &csr.col_idx);
        push_f32s(payload, &csr.values);
        Storage::Csr {
            nnz: csr.values.len() as u64,
        }
    } else {
        push_f32s(payload, tensor.data());
        Storage::Dense
    };
    if let Some(mask) = mask {
        push_bitmap(payload, mask);
    }
    Ok(TensorMeta {
        layer,
        role: role.to_string(),
        shape: dims.to_vec(),
        storage,
        mask: mask.is_some(),
    })
}

/// Write `net` to `path`. Heavily zeroed weight tensors are stored sparse;
/// loading reproduces the network bit for bit.
pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (li, layer) in net.layers.iter().enumerate() {
        let Some(params) = layer.state.params() else {
            continue;
        };
        tensors.push(encode_tensor(
            li,
            "weight",
            &params.weight,
            params.mask.as_deref(),
            &mut payload,
        )?);
        tensors.push(encode_tensor(li, "bias", &params.bias, None, &mut payload)?);
    }
    let header = Header {
        spec: net.spec().clone(),
        input: net.input_dims(),
        maxout: net.maxout_state().cloned(),
        tensors,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Structure(format!("header encode: {e}")))?;
    let mut bytes = Vec::with_capacity(12 + header_json.len() + payload.len());
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut bytes, CHECKPOINT_VERSION);
    push_u32(&mut bytes, header_json.len() as u32);
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(
                self.at as u64,
                format!(
                    "truncated: {what} needs {n} bytes, {} left",
                    self.bytes.len() - self.at
                ),
            ));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_tensor(cur: &mut Cursor, meta: &TensorMeta) -> Result<(Tensor, Option<Vec<bool>>)> {
    let len: usize = meta.shape.iter().product();
    let values = match meta.storage {
        Storage::Dense => cur.f32s(len, "dense values")?,
        Storage::Csr { nnz } => {
            if meta.shape.len() < 2 {
                return Err(Error::format(
                    cur.at as u64,
                    format!("sparse storage on a {}-d tensor", meta.shape.len()),
                ));
            }
            let rows = meta.shape[0];
            let cols: usize = meta.shape[1..].iter().product();
            let row_ptr_at = cur.at;
            let row_ptr = cur.u32s(rows + 1, "row_ptr")?;
            let col_at = cur.at;
            let col_idx = cur.u32s(nnz as usize, "col_idx")?;
            let values = cur.f32s(nnz as usize, "sparse values")?;
            let csr = CsrBlob {
                rows: rows as u32,
                cols: cols as u32,
                row_ptr,
                col_idx,
                values,
            };
            if csr.row_ptr.last().copied() != Some(nnz as u32) {
                return Err(Error::format(
                    (row_ptr_at + 4 * rows) as u64,
                    format!(
                        "row_ptr ends at {}, header says nnz = {nnz}",
                        csr.row_ptr.last().unwrap()
                    ),
                ));
            }
            if let Some(pos) = csr.row_ptr.windows(2).position(|p| p[0] > p[1]) {
                return Err(Error::format(
                    (row_ptr_at + 4 * (pos + 1)) as u64,
                    "row_ptr decreases",
                ));
            }
            csr.to_dense()
                .map_err(|e| Error::format(col_at as u64, format!("invalid CSR blob: {e}")))?
        }
    };
    let tensor = Tensor::from_vec(Shape::new(meta.shape.clone()), values)
        .map_err(|e| Error::format(cur.at as u64, format!("tensor rebuild: {e}")))?;
    let mask = if meta.mask {
        let bytes = cur.take(len.div_ceil(8), "mask bitmap")?;
        Some((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
    } else {
        None
    };
    Ok((tensor, mask))
}

/// Read a checkpoint back into a network. Malformed input yields a format
/// error naming the byte offset of the fault.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        at: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let header_len = cur.u32("header length")? as usize;
    let header_at = cur.at;
    let header_raw = cur.take(header_len, "header")?;
    let header: Header = serde_json::from_slice(header_raw)
        .map_err(|e| Error::format(header_at as u64, format!("header JSON: {e}")))?;
    header
        .spec
        .validate()
        .map_err(|e| Error::format(header_at as u64, format!("invalid spec in header: {e}")))?;

    let mut metas = header.tensors.iter();
    let mut maxout = header.maxout;
    let mut layers = Vec::with_capacity(header.spec.layers.len());
    for (li, lspec) in header.spec.layers.iter().enumerate() {
        let state = match lspec {
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } | LayerSpec::Softmax { .. } => {
                let wmeta = metas.next().ok_or_else(|| {
                    Error::format(header_at as u64, format!("missing weight entry for layer {li}"))
                })?;
                if wmeta.layer != li || wmeta.role != "weight" {
                    return Err(Error::format(
                        header_at as u64,
                        format!("expected weight of layer {li}, header lists {} of layer {}", wmeta.role, wmeta.layer),
                    ));
                }
                let (weight, mask) = decode_tensor(&mut cur, wmeta)?;
                let bmeta = metas.next().ok_or_else(|| {
                    Error::format(header_at as u64, format!("missing bias entry for layer {li}"))
                })?;
                if bmeta.layer != li || bmeta.role != "bias" || bmeta.mask {
                    return Err(Error::format(
                        header_at as u64,
                        format!("malformed bias entry for layer {li}"),
                    ));
                }
                let (bias, _) = decode_tensor(&mut cur, bmeta)?;
                let mut params = Params { weight, bias, mask };
                params.apply_mask();
                match lspec {
                    LayerSpec::Conv2d { .. } => LayerState::Conv(params),
                    LayerSpec::Dense { .. } => LayerState::Dense(params),
                    _ => LayerState::Softmax(params),
                }
            }
            LayerSpec::Maxpool2 => LayerState::Pool,
            LayerSpec::Relu => LayerState::Relu,
            LayerSpec::Maxout { .. } => {
                let st = maxout.take().ok_or_else(|| {
                    Error::format(header_at as u64, "header is missing the maxout state")
                })?;
                LayerState::Maxout(st)
            }
        };
        layers.push(Layer {
            spec: *lspec,
            state,
        });
    }
    if metas.next().is_some() {
        return Err(Error::format(
            header_at as u64,
            "header lists more tensors than the architecture has layers",
        ));
    }
    if maxout.is_some() {
        return Err(Error::format(
            header_at as u64,
            "header carries maxout state but the architecture has no maxout layer",
        ));
    }
    if cur.at != bytes.len() {
        return Err(Error::format(
            cur.at as u64,
            format!("{} trailing bytes after payload", bytes.len() - cur.at),
        ));
    }
    Network::from_parts(header.spec, header.input, layers)
}

/// One row of an experiment report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub stage: String,
    /// Maxout group size after this stage (1 when no maxout).
    pub k: u32,
    /// Optimizer iterations behind this row.
    pub iteration: u64,
    pub accuracy: f64,
    pub orig_weights: u64,
    pub remaining_weights: u64,
    pub masked_weights: u64,
    pub pw_percent: f64,
    pub combined_percent: f64,
    pub dead_fraction: f64,
    pub seconds: f64,
}

pub const REPORT_HEADER: &str = "stage,k,iteration,accuracy,orig_weights,remaining_weights,\
                                 masked_weights,pw_percent,combined_percent,dead_fraction,seconds";

/// Six significant digits, scientific, parseable by `f64::from_str`.
fn fmt_sig6(x: f64) -> String {
    format!("{x:.5e}")
}

/// Write records as CSV. Byte-identical output for identical records.
pub fn write_report(records: &[ExperimentRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for r in records {
        if r.stage.contains(',') || r.stage.contains('\n') {
            return Err(Error::Argument(format!(
                "stage label {:?} would corrupt the CSV",
                r.stage
            )));
        }
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.stage,
            r.k,
            r.iteration,
            fmt_sig6(r.accuracy),
            r.orig_weights,
            r.remaining_weights,
            r.masked_weights,
            fmt_sig6(r.pw_percent),
            fmt_sig6(r.combined_percent),
            fmt_sig6(r.dead_fraction),
            fmt_sig6(r.seconds),
        )
        .expect("string write cannot fail");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a report CSV back. Numeric fields reproduce what was written to six
/// significant digits.
pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ExperimentRecord>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut offset = 0u64;
    let mut saw_header = false;
    for raw in content.split_inclusive('\n') {
        let line_at = offset;
        offset += raw.len() as u64;
        let line = raw.trim_end_matches('\n');
        if !saw_header {
            if line != REPORT_HEADER {
                return Err(Error::format(line_at, "missing or wrong CSV header"));
            }
            saw_header = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::format(
                line_at,
                format!("expected 11 fields, got {}", fields.len()),
            ));
        }
        fn field<T: std::str::FromStr>(s: &str, at: u64, what: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::format(at, format!("bad {what} {s:?}")))
        }
        records.push(ExperimentRecord {
            stage: fields[0].to_string(),
            k: field(fields[1], line_at, "k")?,
            iteration: field(fields[2], line_at, "iteration")?,
            accuracy: field(fields[3], line_at, "accuracy")?,
            orig_weights: field(fields[4], line_at, "orig_weights")?,
            remaining_weights: field(fields[5], line_at, "remaining_weights")?,
            masked_weights: field(fields[6], line_at, "masked_weights")?,
            pw_percent: field(fields[7], line_at, "pw_percent")?,
            combined_percent: field(fields[8], line_at, "combined_percent")?,
            dead_fraction: field(fields[9], line_at, "dead_fraction")?,
            seconds: field(fields[10], line_at, "seconds")?,
        });
    }
    if !saw_header {
        return Err(Error::format(0, "empty report file"));
    }
    Ok(records)
}
