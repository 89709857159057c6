//! MNIST IDX ingestion, deterministic splits and batching, and the flat
//! embeddings text format consumed by the verification metrics.
//!
//! Loaders never silently truncate: any structural anomaly in an input file
//! is a format error naming the byte offset where parsing stopped.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Shape, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;

/// An immutable labeled image set, pixels scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    /// `N x 1 x 28 x 28`.
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: String,
}

impl DatasetHandle {
    pub fn new(images: Tensor, labels: Vec<u8>, split: impl Into<String>) -> Result<DatasetHandle> {
        let dims = images.shape().dims();
        let n = labels.len();
        if dims != [n, 1, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(Error::Data(format!(
                "images shape {} does not match {n} labels",
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
            return Err(Error::Data(format!("label {bad} outside 0..10")));
        }
        Ok(DatasetHandle {
            images,
            labels,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixels of sample `i` as a flat 784-element slice.
    pub fn image(&self, i: usize) -> &[f32] {
        let px = IMAGE_SIDE * IMAGE_SIDE;
        &self.images.data()[i * px..(i + 1) * px]
    }

    /// Copy of the first `n` samples, in file order.
    pub fn head(&self, n: usize) -> Result<DatasetHandle> {
        if n == 0 || n > self.len() {
            return Err(Error::Argument(format!(
                "head size {n} out of range for {} samples",
                self.len()
            )));
        }
        let px = IMAGE_SIDE * IMAGE_SIDE;
        DatasetHandle::new(
            Tensor::from_vec(
                Shape::new([n, 1, IMAGE_SIDE, IMAGE_SIDE]),
                self.images.data()[..n * px].to_vec(),
            )?,
            self.labels[..n].to_vec(),
            self.split.clone(),
        )
    }

    /// Deterministic batch iterator: a fresh permutation per `(seed, epoch)`,
    /// full coverage, final short batch included. Substream 0 of `seed` is
    /// left untouched for callers (weight initialization).
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        let mut order: Vec<u32> = (0..self.len() as u32).collect();
        let mut rng = Rng::from_seed(seed).stream(1 + epoch);
        rng.shuffle(&mut order);
        Batches {
            data: self,
            order,
            batch_size,
            next: 0,
        }
    }

    /// Gather the samples at `indices` into a batch.
    pub fn gather(&self, indices: &[u32]) -> (Tensor, Vec<u8>) {
        let px = IMAGE_SIDE * IMAGE_SIDE;
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let i = i as usize;
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(
            Shape::new([indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE]),
            data,
        )
        .expect("gather length arithmetic");
        (t, labels)
    }
}

/// Iterator over one epoch's shuffled batches.
pub struct Batches<'a> {
    data: &'a DatasetHandle,
    order: Vec<u32>,
    batch_size: usize,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let batch = self.data.gather(&self.order[self.next..end]);
        self.next = end;
        Some(batch)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let bytes: [u8; 4] = self
            .buf
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::format(self.pos as u64, "unexpected end of file"))?
            .try_into()
            .unwrap();
        self.pos += 4;
        Ok(u32::from_be_bytes(bytes))
    }
}

/// Load an MNIST image/label file pair (big-endian IDX containers) and scale
/// pixels to `[0, 1]` by dividing by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<DatasetHandle> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img_buf = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_buf = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let mut cur = Cursor { buf: &img_buf, pos: 0 };
    let magic = cur.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            0,
            format!("bad images magic {magic:#010x} (expected {IMAGE_MAGIC:#010x})"),
        ));
    }
    let count = cur.u32_be()? as usize;
    let rows_at = cur.pos;
    let rows = cur.u32_be()? as usize;
    let cols_at = cur.pos;
    let cols = cur.u32_be()? as usize;
    if rows != IMAGE_SIDE {
        return Err(Error::format(rows_at as u64, format!("expected 28 rows, got {rows}")));
    }
    if cols != IMAGE_SIDE {
        return Err(Error::format(cols_at as u64, format!("expected 28 columns, got {cols}")));
    }
    let want = count * rows * cols;
    let payload = &img_buf[cur.pos..];
    if payload.len() != want {
        return Err(Error::format(
            cur.pos as u64,
            format!("image payload holds {} bytes, header promises {want}", payload.len()),
        ));
    }

    let mut cur = Cursor { buf: &lbl_buf, pos: 0 };
    let magic = cur.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            0,
            format!("bad labels magic {magic:#010x} (expected {LABEL_MAGIC:#010x})"),
        ));
    }
    let count_at = cur.pos;
    let lbl_count = cur.u32_be()? as usize;
    if lbl_count != count {
        return Err(Error::format(
            count_at as u64,
            format!("label count {lbl_count} != image count {count}"),
        ));
    }
    let lbl_payload = &lbl_buf[cur.pos..];
    if lbl_payload.len() != count {
        return Err(Error::format(
            cur.pos as u64,
            format!("label payload holds {} bytes, header promises {count}", lbl_payload.len()),
        ));
    }
    if let Some(bad) = lbl_payload.iter().position(|&l| l >= 10) {
        return Err(Error::format(
            (cur.pos + bad) as u64,
            format!("label value {} outside 0..10", lbl_payload[bad]),
        ));
    }

    let data: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::from_vec(Shape::new([count, 1, IMAGE_SIDE, IMAGE_SIDE]), data)?;
    let split = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    DatasetHandle::new(images, lbl_payload.to_vec(), split)
}

/// Split off the last `holdout` samples (file order) as a validation set.
pub fn split_validation(data: &DatasetHandle, holdout: usize) -> Result<(DatasetHandle, DatasetHandle)> {
    let n = data.len();
    if holdout == 0 || holdout >= n {
        return Err(Error::Argument(format!(
            "holdout {holdout} out of range for {n} samples"
        )));
    }
    let keep = n - holdout;
    let px = IMAGE_SIDE * IMAGE_SIDE;
    let train = DatasetHandle::new(
        Tensor::from_vec(
            Shape::new([keep, 1, IMAGE_SIDE, IMAGE_SIDE]),
            data.images.data()[..keep * px].to_vec(),
        )?,
        data.labels[..keep].to_vec(),
        format!("{}:train", data.split),
    )?;
    let val = DatasetHandle::new(
        Tensor::from_vec(
            Shape::new([holdout, 1, IMAGE_SIDE, IMAGE_SIDE]),
            data.images.data()[keep * px..].to_vec(),
        )?,
        data.labels[keep..].to_vec(),
        format!("{}:val", data.split),
    )?;
    Ok((train, val))
}

/// Matched and non-matched descriptor pairs for verification metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPairs {
    pub matched: Vec<(Vec<f32>, Vec<f32>)>,
    pub nonmatched: Vec<(Vec<f32>, Vec<f32>)>,
    pub dim: usize,
}

/// Parse the line-oriented embeddings format: a `d <dim>` header, then one
/// `m`/`n` line per matched/non-matched pair carrying both vectors.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingPairs> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text)
}

fn parse_embeddings(text: &str) -> Result<EmbeddingPairs> {
    let mut dim: Option<usize> = None;
    let mut matched = Vec::new();
    let mut nonmatched = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let tag = tokens.next().unwrap();
        match (tag, dim) {
            ("d", None) => {
                let d: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::format(at, "header must be `d <positive dimension>`"))?;
                if tokens.next().is_some() {
                    return Err(Error::format(at, "trailing tokens after header"));
                }
                dim = Some(d);
            }
            ("d", Some(_)) => return Err(Error::format(at, "duplicate header line")),
            ("m" | "n", Some(d)) => {
                let vals: Vec<f32> = tokens
                    .map(|t| t.parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::format(at, format!("bad float: {e}")))?;
                if vals.len() != 2 * d {
                    return Err(Error::format(
                        at,
                        format!("pair line holds {} values, expected {}", vals.len(), 2 * d),
                    ));
                }
                if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
                    return Err(Error::format(at, format!("non-finite value {bad}")));
                }
                let pair = (vals[..d].to_vec(), vals[d..].to_vec());
                if tag == "m" {
                    matched.push(pair);
                } else {
                    nonmatched.push(pair);
                }
            }
            (_, None) => return Err(Error::format(at, "missing `d <dimension>` header")),
            (other, _) => {
                return Err(Error::format(at, format!("unknown line tag {other:?}")))
            }
        }
    }
    let dim = dim.ok_or_else(|| Error::format(offset, "missing `d <dimension>` header"))?;
    if matched.is_empty() {
        return Err(Error::format(offset, "no matched pairs (metrics undefined)"));
    }
    if nonmatched.is_empty() {
        return Err(Error::format(offset, "no non-matched pairs (metrics undefined)"));
    }
    Ok(EmbeddingPairs {
        matched,
        nonmatched,
        dim,
    })
}

/// Write pairs in the format [`load_embeddings`] reads; floats use Rust's
/// shortest round-trip representation, so read-back is exact.
pub fn write_embeddings(pairs: &EmbeddingPairs, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("d {}\n", pairs.dim);
    let mut emit = |tag: &str, list: &[(Vec<f32>, Vec<f32>)]| {
        for (u, v) in list {
            out.push_str(tag);
            for x in u.iter().chain(v) {
                out.push(' ');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
    };
    emit("m", &pairs.matched);
    emit("n", &pairs.nonmatched);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
