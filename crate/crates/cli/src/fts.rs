//! FTS feature-tensor datasets and FTSP parameter checkpoints.
//!
//! Dataset layout, little-endian:
//!
//! ```text
//! "FTS1" | version u32 = 1 | num_samples u32 | C₀ u32 | H u32 | W u32 | num_classes u32
//!        | labels: num_samples × u32
//!        | payload: num_samples × C₀·H·W × f32, row-major [C, H, W] per sample
//! ```
//!
//! Checkpoint layout: `"FTSP" | version u32 | block count u32` followed by
//! `name_len u32 | name | rows u32 | cols u32 | rows·cols × f64` per block.

use std::fs;
use std::path::Path;

use spdagg::{FeatureTensor, Sample};
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"FTS1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FTSP";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { offset: usize, version: u32 },

    #[error("truncated input at byte {offset}: expected {expected} bytes, got {actual}")]
    Truncated {
        offset: usize,
        expected: u64,
        actual: u64,
    },

    #[error("{extra} trailing bytes after byte {offset}")]
    TrailingBytes { offset: usize, extra: u64 },

    #[error("invalid field at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FormatError {
    /// Byte offset the error refers to, when it has one.
    pub fn offset(&self) -> Option<usize> {
        match self {
            FormatError::BadMagic { .. } => Some(0),
            FormatError::UnsupportedVersion { offset, .. }
            | FormatError::Truncated { offset, .. }
            | FormatError::TrailingBytes { offset, .. }
            | FormatError::Invalid { offset, .. } => Some(*offset),
            FormatError::Io(_) => None,
        }
    }
}

fn invalid(offset: usize, reason: impl Into<String>) -> FormatError {
    FormatError::Invalid {
        offset,
        reason: reason.into(),
    }
}

/// Bounds-checked little-endian reader that tracks its byte offset.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = if self.remaining() < 4 {
            self.bytes[self.pos..].to_vec()
        } else {
            self.bytes[self.pos..self.pos + 4].to_vec()
        };
        if found.as_slice() != expected {
            return Err(FormatError::BadMagic {
                expected: *expected,
                found,
            });
        }
        self.pos += 4;
        Ok(())
    }

    pub(crate) fn version(&mut self) -> Result<(), FormatError> {
        let offset = self.pos;
        let version = self.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion { offset, version });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        if self.remaining() > 0 {
            return Err(FormatError::TrailingBytes {
                offset: self.pos,
                extra: self.remaining() as u64,
            });
        }
        Ok(())
    }
}

/// A labelled set of feature tensors as stored on disk (single precision).
#[derive(Debug, Clone, PartialEq)]
pub struct FtsDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    /// One `C₀·H·W` block per sample.
    pub payload: Vec<Vec<f32>>,
}

impl FtsDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Widens the payload to `f64` tensors.
    pub fn to_samples(&self) -> Vec<Sample> {
        self.labels
            .iter()
            .zip(&self.payload)
            .map(|(&label, data)| Sample {
                x: FeatureTensor::new(
                    self.channels,
                    self.height,
                    self.width,
                    data.iter().map(|v| f64::from(*v)).collect(),
                )
                .expect("validated shape"),
                label,
            })
            .collect()
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (FtsDataset, FtsDataset) {
        let n = n.min(self.len());
        let part = |labels: &[usize], payload: &[Vec<f32>]| FtsDataset {
            labels: labels.to_vec(),
            payload: payload.to_vec(),
            ..self.clone_header()
        };
        (
            part(&self.labels[..n], &self.payload[..n]),
            part(&self.labels[n..], &self.payload[n..]),
        )
    }

    fn clone_header(&self) -> FtsDataset {
        FtsDataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            labels: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (4 + 4 * self.sample_len()));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            VERSION,
            self.len() as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&(*l as u32).to_le_bytes());
        }
        for sample in &self.payload {
            for v in sample {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut cur = Cursor::new(bytes);
        cur.magic(DATASET_MAGIC)?;
        cur.version()?;
        let n = cur.u32()?;
        let c0 = cur.u32()?;
        let h = cur.u32()?;
        let w = cur.u32()?;
        let num_classes = cur.u32()?;
        if n == 0 {
            return Err(invalid(8, "dataset has no samples"));
        }
        if c0 == 0 {
            return Err(invalid(12, "channel count is zero"));
        }
        if u64::from(h) * u64::from(w) < 2 {
            return Err(invalid(16, format!("need at least two spatial positions, got {h}x{w}")));
        }
        if num_classes == 0 {
            return Err(invalid(24, "class count is zero"));
        }

        let per_sample = u64::from(c0)
            .checked_mul(u64::from(h))
            .and_then(|v| v.checked_mul(u64::from(w)))
            .ok_or_else(|| invalid(12, "tensor shape overflows"))?;
        let expected = u64::from(n)
            .checked_mul(per_sample.checked_add(1).ok_or_else(|| invalid(12, "tensor shape overflows"))?)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_LEN as u64))
            .ok_or_else(|| invalid(8, "payload size overflows"))?;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(FormatError::Truncated {
                offset: bytes.len(),
                expected,
                actual,
            });
        }
        if actual > expected {
            return Err(FormatError::TrailingBytes {
                offset: expected as usize,
                extra: actual - expected,
            });
        }

        let mut labels = Vec::with_capacity(n as usize);
        let mut seen = vec![false; num_classes as usize];
        for _ in 0..n {
            let offset = cur.pos();
            let label = cur.u32()?;
            if label >= num_classes {
                return Err(invalid(offset, format!("label {label} >= num_classes {num_classes}")));
            }
            seen[label as usize] = true;
            labels.push(label as usize);
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(invalid(24, format!("declared class {missing} has no samples")));
        }

        let per_sample = per_sample as usize;
        let mut payload = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let mut sample = Vec::with_capacity(per_sample);
            for _ in 0..per_sample {
                let offset = cur.pos();
                let v = cur.f32()?;
                if !v.is_finite() {
                    return Err(invalid(offset, "non-finite feature value"));
                }
                sample.push(v);
            }
            payload.push(sample);
        }
        cur.finish()?;
        Ok(FtsDataset {
            channels: c0 as usize,
            height: h as usize,
            width: w as usize,
            num_classes: num_classes as usize,
            labels,
            payload,
        })
    }
}

pub fn fts_read(path: &Path) -> Result<FtsDataset, FormatError> {
    FtsDataset::from_bytes(&fs::read(path)?)
}

pub fn fts_write(dataset: &FtsDataset, path: &Path) -> Result<(), FormatError> {
    fs::write(path, dataset.to_bytes())?;
    Ok(())
}

/// A named `rows×cols` block of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn blocks_to_bytes(blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.rows as u32).to_le_bytes());
        out.extend_from_slice(&(b.cols as u32).to_le_bytes());
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn blocks_from_bytes(bytes: &[u8]) -> Result<Vec<Block>, FormatError> {
    let mut cur = Cursor::new(bytes);
    cur.magic(CHECKPOINT_MAGIC)?;
    cur.version()?;
    let count = cur.u32()?;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let name_offset = cur.pos();
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| invalid(name_offset + 4, "block name is not UTF-8"))?
            .to_string();
        let shape_offset = cur.pos();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|len| len.checked_mul(8).is_some_and(|b| b <= cur.remaining()))
            .ok_or_else(|| FormatError::Truncated {
                offset: shape_offset,
                expected: (cur.pos() as u64).saturating_add((rows as u64).saturating_mul(cols as u64).saturating_mul(8)),
                actual: bytes.len() as u64,
            })?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(cur.f64()?);
        }
        blocks.push(Block { name, rows, cols, data });
    }
    cur.finish()?;
    Ok(blocks)
}
