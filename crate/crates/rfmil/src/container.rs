//! Binary container for images, masks, bags, and checkpoints.
//!
//! Layout: magic `RFBC`, little-endian u32 format version, u64 header
//! length, a JSON header describing the payload, then the raw array data in
//! header order. Arrays are little-endian, row-major. Output bytes are a
//! pure function of the content, so identical inputs produce identical
//! files.
//!
//! Header schema (JSON):
//! ```json
//! {
//!   "format_version": 1,
//!   "kind": "rf_image",
//!   "arrays": [{"name": "samples", "dtype": "f32", "shape": [140, 230]}],
//!   "meta": { "core_id": "c0001", "depth_mm": 28.0 }
//! }
//! ```

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"RFBC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    arrays: Vec<ArrayInfo>,
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

/// An in-memory container: a kind tag, free-form metadata, and named arrays.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub kind: String,
    pub meta: BTreeMap<String, serde_json::Value>,
    arrays: Vec<(ArrayInfo, ArrayData)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format(format!("missing string meta '{key}'")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Format(format!("missing numeric meta '{key}'")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format(format!("missing integer meta '{key}'")))
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: ArrayData) {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "array '{name}': shape/product mismatch");
        self.arrays.push((
            ArrayInfo {
                name: name.to_string(),
                dtype: data.dtype().to_string(),
                shape: shape.to_vec(),
            },
            data,
        ));
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        self.push(name, shape, ArrayData::F32(data));
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        self.push(name, shape, ArrayData::F64(data));
    }

    pub fn push_u8(&mut self, name: &str, shape: &[usize], data: Vec<u8>) {
        self.push(name, shape, ArrayData::U8(data));
    }

    pub fn array_names(&self) -> Vec<&str> {
        self.arrays.iter().map(|(i, _)| i.name.as_str()).collect()
    }

    fn find(&self, name: &str) -> Result<&(ArrayInfo, ArrayData)> {
        self.arrays
            .iter()
            .find(|(i, _)| i.name == name)
            .ok_or_else(|| Error::Format(format!("container has no array '{name}'")))
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.find(name)? {
            (info, ArrayData::F32(v)) => Ok((&info.shape, v)),
            (info, _) => Err(Error::Format(format!(
                "array '{name}' is {} not f32",
                info.dtype
            ))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.find(name)? {
            (info, ArrayData::F64(v)) => Ok((&info.shape, v)),
            (info, _) => Err(Error::Format(format!(
                "array '{name}' is {} not f64",
                info.dtype
            ))),
        }
    }

    pub fn u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.find(name)? {
            (info, ArrayData::U8(v)) => Ok((&info.shape, v)),
            (info, _) => Err(Error::Format(format!(
                "array '{name}' is {} not u8",
                info.dtype
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            arrays: self.arrays.iter().map(|(i, _)| i.clone()).collect(),
            meta: self.meta.clone(),
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + hjson.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, data) in &self.arrays {
            match data {
                ArrayData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Format("not a container file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16 + hlen;
        if bytes.len() < hend {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..hend])
            .map_err(|e| Error::Format(format!("bad header json: {e}")))?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut off = hend;
        for info in header.arrays {
            let n: usize = info.shape.iter().product();
            let data = match info.dtype.as_str() {
                "f32" => {
                    let nb = n * 4;
                    let seg = bytes
                        .get(off..off + nb)
                        .ok_or_else(|| Error::Format("truncated f32 array".into()))?;
                    off += nb;
                    ArrayData::F32(
                        seg.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                "f64" => {
                    let nb = n * 8;
                    let seg = bytes
                        .get(off..off + nb)
                        .ok_or_else(|| Error::Format("truncated f64 array".into()))?;
                    off += nb;
                    ArrayData::F64(
                        seg.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                "u8" => {
                    let seg = bytes
                        .get(off..off + n)
                        .ok_or_else(|| Error::Format("truncated u8 array".into()))?;
                    off += n;
                    ArrayData::U8(seg.to_vec())
                }
                other => return Err(Error::Format(format!("unknown dtype '{other}'"))),
            };
            arrays.push((info, data));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::File::open(path.as_ref()).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.as_ref().display()),
            ))
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut c = Container::new("rf_image");
        c.set_meta("core_id", "c17");
        c.set_meta("depth_mm", 28.0);
        c.push_f32("samples", &[2, 3], vec![1.5, -2.25, 0.1, f32::MIN_POSITIVE, 1e30, -0.0]);
        c.push_u8("mask", &[2, 3], vec![0, 1, 1, 0, 0, 1]);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind, "rf_image");
        assert_eq!(back.meta_str("core_id").unwrap(), "c17");
        let (shape, data) = back.f32("samples").unwrap();
        assert_eq!(shape, &[2, 3]);
        assert_eq!(data[3], f32::MIN_POSITIVE);
        assert_eq!(data[5].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.u8("mask").unwrap().1, &[0, 1, 1, 0, 0, 1]);
    }

    #[test]
    fn serialization_is_deterministic() {
        let build = || {
            let mut c = Container::new("bag");
            c.set_meta("zeta", 1);
            c.set_meta("alpha", "x");
            c.push_f32("rois", &[1, 2], vec![0.25, 0.75]);
            c.to_bytes()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        assert!(Container::from_bytes(b"NOPE").is_err());
        let mut bytes = Container::new("x").to_bytes();
        bytes[4] = 9; // tamper with version
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn missing_array_is_an_error() {
        let c = Container::new("x");
        assert!(c.f32("nope").is_err());
    }
}
