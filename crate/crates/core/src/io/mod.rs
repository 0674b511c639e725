//! Bit-exact file formats: binary point-cloud frames, text annotation and
//! prediction files, fp64 parameter checkpoints, and JSON reports.
//!
//! Every reader is total: malformed bytes of any kind produce a
//! [`FormatError`], never a panic, and nothing is allocated from
//! length fields before they are checked against the actual byte count.
//! Every writer is deterministic, so equal inputs give byte-equal files.

pub mod annot;
pub mod checkpoint;
pub mod frame;
pub mod report;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected `{expected}`")]
    BadMagic { expected: &'static str },
    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion { what: &'static str, expected: u16, found: u16 },
    #[error("truncated file while reading {context}")]
    Truncated { context: &'static str },
    #[error("unexpected data after the end of the payload")]
    TrailingData,
    #[error("file is not valid UTF-8")]
    InvalidUtf8,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: point index {index} out of range for {count} points")]
    IndexOutOfRange { line: usize, index: usize, count: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Bounds-checked little-endian cursor used by the binary readers.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { context });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u16_le(&mut self, context: &'static str) -> Result<u16, FormatError> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32_le(&mut self, context: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32_le(&mut self, context: &'static str) -> Result<f32, FormatError> {
        let b = self.take(4, context)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64_le(&mut self, context: &'static str) -> Result<f64, FormatError> {
        let b = self.take(8, context)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}
