//! Binary tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! [0..12)   magic "baa.tensor\0\0"
//! [12..16)  format version, u32
//! [16..24)  header length L, u64
//! [24..24+L) JSON header {"dtype","shape","layout"}
//! [24+L..)  payload, elements in row-major order
//! ```
//!
//! `layout` is a semantic tag ("HWC", "HW", "NCHW", "rows", ...) recorded for
//! tooling; the shape alone defines the memory layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dense::Tensor;
use super::scalar::Scalar;

pub const MAGIC: [u8; 12] = *b"baa.tensor\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a tensor container (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported container version {got} (expected {VERSION})")]
    BadVersion { path: String, got: u32 },
    #[error("{path}: header is not valid JSON: {source}")]
    BadHeader {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: dtype {got:?} does not match requested {expected:?}")]
    DtypeMismatch {
        path: String,
        expected: String,
        got: String,
    },
    #[error("{path}: payload holds {got} bytes, shape {shape:?} needs {expected}")]
    PayloadSize {
        path: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{path}: truncated container")]
    Truncated { path: String },
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    layout: String,
}

pub fn save_tensor<T: Scalar>(
    path: impl AsRef<Path>,
    t: &Tensor<T>,
    layout: &str,
) -> Result<(), ContainerError> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&Header {
        dtype: T::DTYPE.to_string(),
        shape: t.shape().to_vec(),
        layout: layout.to_string(),
    })
    .expect("header always serialises");
    let mut out = Vec::with_capacity(24 + header.len() + t.len() * T::BYTES);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    fs::write(path, out).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<(Tensor<T>, String), ContainerError> {
    let path = path.as_ref();
    let pstr = || path.display().to_string();
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: pstr(),
        source,
    })?;
    if bytes.len() < 24 {
        return Err(ContainerError::Truncated { path: pstr() });
    }
    if bytes[..12] != MAGIC {
        return Err(ContainerError::BadMagic { path: pstr() });
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if version != VERSION {
        return Err(ContainerError::BadVersion {
            path: pstr(),
            got: version,
        });
    }
    let hlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() < 24 + hlen {
        return Err(ContainerError::Truncated { path: pstr() });
    }
    let header: Header =
        serde_json::from_slice(&bytes[24..24 + hlen]).map_err(|source| ContainerError::BadHeader {
            path: pstr(),
            source,
        })?;
    if header.dtype != T::DTYPE {
        return Err(ContainerError::DtypeMismatch {
            path: pstr(),
            expected: T::DTYPE.to_string(),
            got: header.dtype,
        });
    }
    let payload = &bytes[24 + hlen..];
    let n: usize = header.shape.iter().product();
    if payload.len() != n * T::BYTES {
        return Err(ContainerError::PayloadSize {
            path: pstr(),
            shape: header.shape,
            expected: n * T::BYTES,
            got: payload.len(),
        });
    }
    let data: Vec<T> = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    let t = Tensor::from_vec(&header.shape, data).expect("length checked");
    Ok((t, header.layout))
}
