//! Shared framing for the on-disk formats: 4 magic bytes, a little-endian
//! `u16` version, a `u32` metadata length and a UTF-8 JSON metadata document,
//! followed by raw float32 little-endian payloads.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::scalar::Scalar;

pub const FORMAT_VERSION: u16 = 1;

pub(crate) fn write_header<W: Write, M: Serialize>(
    w: &mut W,
    magic: &[u8; 4],
    meta: &M,
) -> io::Result<()> {
    let doc = serde_json::to_vec(meta).map_err(io::Error::other)?;
    let len = u32::try_from(doc.len()).map_err(io::Error::other)?;
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&doc)
}

/// Failure while reading a framed file, before it is mapped onto the
/// format-specific corruption error.
#[derive(Debug)]
pub(crate) enum HeaderError {
    Io(io::Error),
    Magic([u8; 4]),
    Version(u16),
    Metadata(String),
}

impl std::fmt::Display for HeaderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Io(e) => write!(f, "truncated or unreadable: {e}"),
            Self::Magic(m) => write!(f, "bad magic {:?}", String::from_utf8_lossy(m)),
            Self::Version(v) => write!(f, "unsupported version {v} (expected {FORMAT_VERSION})"),
            Self::Metadata(e) => write!(f, "bad metadata document: {e}"),
        }
    }
}

pub(crate) fn read_header<R: Read, M: DeserializeOwned>(
    r: &mut R,
    magic: &[u8; 4],
) -> Result<M, HeaderError> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(HeaderError::Io)?;
    if &m != magic {
        return Err(HeaderError::Magic(m));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v).map_err(HeaderError::Io)?;
    let version = u16::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(HeaderError::Version(version));
    }
    let mut l = [0u8; 4];
    r.read_exact(&mut l).map_err(HeaderError::Io)?;
    let len = u32::from_le_bytes(l) as usize;
    let mut doc = vec![0u8; len];
    r.read_exact(&mut doc).map_err(HeaderError::Io)?;
    serde_json::from_slice(&doc).map_err(|e| HeaderError::Metadata(e.to_string()))
}

pub(crate) fn write_f32s<W: Write, T: Scalar>(
    w: &mut W,
    values: impl IntoIterator<Item = T>,
) -> io::Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_f32s<R: Read, T: Scalar>(r: &mut R, count: usize) -> io::Result<Vec<T>> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| T::of_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

/// Rejects trailing bytes after the last payload.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> io::Result<bool> {
    let mut probe = [0u8; 1];
    Ok(r.read(&mut probe)? == 0)
}
