//! Self-describing named-tensor container.
//!
//! Layout: the 8-byte magic `DSCKPT01`, a little-endian `u64` header length,
//! a JSON header `{"metadata": …, "tensors": [{"name", "shape"}, …]}`, then
//! every tensor's values as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DSCKPT01";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fail("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| fail("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut offset = 16 + len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + n * 8)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor '{}'", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
            offset += n * 8;
        }
        if offset != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let ckpt = Checkpoint {
                metadata: serde_json::json!({"epoch": 3}),
                tensors: vec![
                    ("a".into(), Tensor::new(vec![split], values[..split].to_vec()).unwrap()),
                    ("b".into(), Tensor::new(vec![values.len() - split], values[split..].to_vec()).unwrap()),
                ],
            };
            let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
            prop_assert_eq!(back.metadata, ckpt.metadata);
            for ((_, x), (_, y)) in back.tensors.iter().zip(&ckpt.tensors) {
                let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        let mut bytes = Checkpoint {
            metadata: serde_json::Value::Null,
            tensors: vec![("w".into(), Tensor::zeros(&[3]))],
        }
        .to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
