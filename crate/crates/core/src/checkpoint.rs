//! Single-file binary container for named tensors plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   "SRNM"
//! version      u32       FORMAT_VERSION
//! header_len   u64       length of the JSON header in bytes
//! header       JSON      { kind, step, metadata, tensors: [{name, dtype, shape, offset, len}] }
//! data         bytes     tensor payloads, offsets relative to the start of this section
//! ```

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SRNM";
pub const FORMAT_VERSION: u32 = 1;

const MAX_HEADER_LEN: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len() * 4,
            TensorData::F64(v) => v.len() * 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => TensorData::F64(flat.to_vec1::<f64>()?),
            DType::F32 => TensorData::F32(flat.to_vec1::<f32>()?),
            other => {
                return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}")));
            }
        };
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = match &self.data {
            TensorData::F32(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
            TensorData::F64(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
        };
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// What the tensors describe, e.g. `translator`, `extractor`, `segmentor`.
    pub kind: String,
    pub step: u64,
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, step: u64, metadata: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            step,
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.tensors.push(NamedTensor::from_tensor(name, t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?} but {} elements",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.data.dtype_name().to_string(),
                shape: t.shape.clone(),
                offset,
                len: t.data.byte_len() as u64,
            });
            offset += t.data.byte_len() as u64;
        }
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    /// Decodes a container. Never panics on malformed input.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(bad("file too short for a checkpoint header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic; not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 16) as u64 {
            return Err(bad("header length exceeds file size"));
        }
        let header_end = 16 + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let data = &bytes[header_end..];

        let mut tensors = Vec::with_capacity(header.tensors.len().min(4096));
        for e in header.tensors {
            let elem = match e.dtype.as_str() {
                "f32" => 4u64,
                "f64" => 8u64,
                other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
            };
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| bad("tensor shape overflows"))?;
            if count.checked_mul(elem) != Some(e.len) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` length {} does not match shape {:?}",
                    e.name, e.len, e.shape
                )));
            }
            let end = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= data.len() as u64)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` extends past end of file", e.name)))?;
            let raw = &data[e.offset as usize..end as usize];
            let payload = if elem == 4 {
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            } else {
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            };
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data: payload,
            });
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the checkpoint holds `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test", 500, serde_json::json!({"a": 1}));
        c.tensors.push(NamedTensor {
            name: "w".into(),
            shape: vec![2, 3],
            data: TensorData::F32(vec![1.0, -2.0, f32::MIN_POSITIVE, 0.0, -0.0, 7.5]),
        });
        c.tensors.push(NamedTensor {
            name: "b".into(),
            shape: vec![],
            data: TensorData::F64(vec![std::f64::consts::PI]),
        });
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let d = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.step, 500);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = sample().encode().unwrap();
        for cut in [0, 3, 15, 20, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(Checkpoint::decode(&bad).is_err());
    }

    #[test]
    fn io_error_names_path() {
        let err = Checkpoint::load("/nonexistent/dir/x.ckpt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.ckpt"));
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::decode(&bytes);
        }

        #[test]
        fn f32_payload_round_trip(v in proptest::collection::vec(any::<f32>(), 0..64), step in any::<u64>()) {
            let mut c = Checkpoint::new("p", step, serde_json::Value::Null);
            c.tensors.push(NamedTensor { name: "t".into(), shape: vec![v.len()], data: TensorData::F32(v.clone()) });
            let d = Checkpoint::decode(&c.encode().unwrap()).unwrap();
            match &d.tensors[0].data {
                TensorData::F32(w) => prop_assert!(v.iter().zip(w).all(|(a, b)| a.to_bits() == b.to_bits())),
                _ => prop_assert!(false),
            }
            prop_assert_eq!(d.step, step);
        }
    }
}
