//! Versioned tensor container.
//!
//! Layout: magic `ECGCKPT1`, a little-endian `u32` header length, a JSON
//! header `{format_version, kind, meta, tensors: [{name, shape, dtype}]}`,
//! then each tensor's values in row-major little-endian order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ECGCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// What the tensors describe, e.g. `"dual_encoder"` or `"index"`.
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Array2<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: [usize; 2],
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorHeader {
                    name: name.clone(),
                    shape: [t.nrows(), t.ncols()],
                    dtype: "f64".into(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::IncompatibleVersion("missing ECGCKPT1 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(Error::CorruptCheckpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::IncompatibleVersion(format!(
                "format version {} (supported: {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let mut data = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n = th.shape[0] * th.shape[1];
            let width = match th.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                other => {
                    return Err(Error::CorruptCheckpoint(format!(
                        "tensor {}: unknown dtype {other}",
                        th.name
                    )))
                }
            };
            if data.len() < n * width {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {} needs {} bytes, {} left",
                    th.name,
                    n * width,
                    data.len()
                )));
            }
            let (chunk, rest) = data.split_at(n * width);
            data = rest;
            let values: Vec<f64> = if width == 8 {
                chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            } else {
                chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            };
            let arr = Array2::from_shape_vec((th.shape[0], th.shape[1]), values)
                .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
            tensors.push((th.name, arr));
        }
        if !data.is_empty() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes after the last tensor",
                data.len()
            )));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::signal_io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test", serde_json::json!({"step": 3}));
        c.tensors
            .push(("a".into(), array![[1.0, -0.0], [f64::MIN_POSITIVE, 1e300]]));
        c.tensors.push(("b".into(), array![[0.1 + 0.2]]));
        c
    }

    #[test]
    fn round_trip_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta, c.meta);
        for ((_, x), (_, y)) in c.tensors.iter().zip(&back.tensors) {
            let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
    }

    #[test]
    fn wrong_magic() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(Error::IncompatibleVersion(_))
        ));
    }

    #[test]
    fn truncated_or_padded_payload() {
        let b = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 8]),
            Err(Error::CorruptCheckpoint(_))
        ));
        let mut longer = b.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(matches!(
            Checkpoint::from_bytes(&longer),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn future_version_rejected() {
        let b = sample().to_bytes();
        let hlen = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(b[12..12 + hlen].to_vec()).unwrap();
        let patched = header.replace("\"format_version\":1", "\"format_version\":9");
        let mut out = b[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&b[12 + hlen..]);
        assert!(matches!(
            Checkpoint::from_bytes(&out),
            Err(Error::IncompatibleVersion(_))
        ));
    }
}
