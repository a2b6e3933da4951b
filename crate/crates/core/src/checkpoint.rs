//! Parameter checkpoint container shared by all trained models.
//!
//! Layout: magic `b"UCKP"`, `u16` version, `u32` header length, UTF-8 JSON
//! [`CheckpointHeader`], then each parameter in header order as raw
//! little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{sha256_hex, write_atomic};

pub const MAGIC: &[u8; 4] = b"UCKP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Model family, e.g. `"translation"` or `"segmentation"`.
    pub kind: String,
    /// Echo of the architecture/training config.
    pub config: serde_json::Value,
    pub iteration: u64,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub upstream: Vec<String>,
    pub params: Vec<ParamEntry>,
}

pub fn encode(header: &CheckpointHeader, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    if header.params.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "header lists {} params, store has {}",
            header.params.len(),
            store.len()
        )));
    }
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + 4 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (entry, id) in header.params.iter().zip(store.ids()) {
        let t = store.get(id);
        if entry.name != store.name(id) || entry.shape != t.shape() {
            return Err(Error::InvalidArgument(format!("header entry '{}' does not match store", entry.name)));
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Header entries describing every parameter of `store`, in order.
pub fn param_entries(store: &ParamStore<f32>) -> Vec<ParamEntry> {
    store
        .ids()
        .map(|id| ParamEntry {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
        })
        .collect()
}

/// Writes the file and returns the SHA-256 of its bytes.
pub fn save(path: &Path, header: &CheckpointHeader, store: &ParamStore<f32>) -> Result<String> {
    let bytes = encode(header, store)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, ParamStore<f32>)> {
    let bad = |r: String| Error::format(path, r);
    if bytes.len() < 10 || &bytes[0..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let mut off = 10 + hlen;
    let mut store = ParamStore::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(off..off + 4 * n)
            .ok_or_else(|| bad(format!("truncated blob '{}'", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok((header, store))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamStore<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Copy values from `src` into `dst` by name, requiring identical layouts.
pub fn restore_into(dst: &mut ParamStore<f32>, src: &ParamStore<f32>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} params, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    for id in src.ids() {
        let name = src.name(id);
        let target = dst
            .find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unexpected parameter '{name}'")))?;
        if dst.get(target).shape() != src.get(id).shape() {
            return Err(Error::shape("checkpoint parameter", dst.get(target).shape(), src.get(id).shape()));
        }
        *dst.get_mut(target) = src.get(id).clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 - 1.5));
        store.add("a.bias", Tensor::from_fn(&[2], |i| i as f32));
        let header = CheckpointHeader {
            kind: "test".into(),
            config: serde_json::json!({"width": 2}),
            iteration: 7,
            seed: 1,
            config_hash: "h".into(),
            upstream: vec!["u".into()],
            params: param_entries(&store),
        };
        let bytes = encode(&header, &store).unwrap();
        let (h2, s2) = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(h2, header);
        assert_eq!(s2.get(s2.find("a.weight").unwrap()), store.get(store.find("a.weight").unwrap()));
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }
}
