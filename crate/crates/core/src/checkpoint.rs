//! Binary checkpoints.
//!
//! Layout (little endian):
//! `b"MANETCKP"` | version `u32` | header length `u64` | JSON header |
//! parameter data as `f64` in store order | CRC-32 of all preceding bytes.
//! The header names the model kind, carries its configuration and any
//! caller metadata, and lists parameter names and shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MANETCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    #[serde(default)]
    meta: Value,
    params: Vec<ParamEntry>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl Checkpoint {
    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad model configuration: {e}")))
    }

    /// Copies the stored values into `store`, which must have the same layout.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        store.load_values(&self.names, self.values.clone())
    }
}

pub fn encode(kind: &str, config: &impl Serialize, meta: Value, store: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_string(),
        config: serde_json::to_value(config).map_err(|e| Error::Checkpoint(e.to_string()))?,
        meta,
        params: store
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(24 + header.len() + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in store.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(err("checksum mismatch (file corrupted or truncated)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| err("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[20..data_start])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut data = body[data_start..].chunks_exact(8);
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if data.len() != total || !data.remainder().is_empty() {
        return Err(err("parameter data length does not match header"));
    }
    let mut names = Vec::with_capacity(header.params.len());
    let mut values = Vec::with_capacity(header.params.len());
    for p in header.params {
        let n: usize = p.shape.iter().product();
        let vals: Vec<f64> = data
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push(Tensor::from_vec(&p.shape, vals)?);
        names.push(p.name);
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        meta: header.meta,
        names,
        values,
    })
}

pub fn save(path: &Path, kind: &str, config: &impl Serialize, meta: Value, store: &ParamStore) -> Result<()> {
    let bytes = encode(kind, config, meta, store)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight".into(), Tensor::from_vec(&[2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        s.add("a.bias".into(), Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = store();
        let bytes = encode("test", &serde_json::json!({"w": 1}), Value::Null, &s).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.kind, "test");
        assert_eq!(ck.names, s.names());
        for (a, b) in ck.values.iter().zip(s.values()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode("test", &0, Value::Null, &store()).unwrap();
        let mid = bytes.len() - 10;
        bytes[mid] ^= 1;
        assert!(decode(&bytes).is_err());
        assert!(decode(b"nonsense").is_err());
        let good = encode("test", &0, Value::Null, &store()).unwrap();
        assert!(decode(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn restore_checks_layout() {
        let ck = decode(&encode("t", &0, Value::Null, &store()).unwrap()).unwrap();
        let mut other = ParamStore::new();
        other.add("x".into(), Tensor::zeros(&[1]));
        assert!(ck.restore(&mut other).is_err());
        let mut same = store();
        same.values_mut()[1].data_mut()[0] = 9.0;
        ck.restore(&mut same).unwrap();
        assert_eq!(same.values()[1].data()[0], 0.1);
    }
}
