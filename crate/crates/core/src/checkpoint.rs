//! Parameter checkpoints.
//!
//! Layout: `u64` little-endian header length, a JSON header listing every
//! tensor (`name`, `shape`, `offset`, `len` in f64 elements) plus free-form
//! metadata, then the concatenated little-endian f64 payload.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::params::{check_manifest, ParamStore};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write<W: Write>(mut out: W, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|(name, a)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                offset,
                len: a.len(),
            };
            offset += a.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { tensors, meta })?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, a) in store.iter() {
        for v in a.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read<R: Read>(mut input: R) -> Result<(ParamStore, serde_json::Value)> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Checkpoint("header length overflow".into()))?;
    if len > 1 << 30 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f64".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let end = t
            .offset
            .checked_add(t.len)
            .filter(|e| *e <= values.len())
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} exceeds payload", t.name)))?;
        if store.id_of(&t.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
        }
        let a = Array::new(t.shape.clone(), values[t.offset..end].to_vec())
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", t.name)))?;
        store.add(t.name.clone(), a);
    }
    Ok((store, header.meta))
}

pub fn save(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf, store, meta)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    read(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Restore `store` in place from a checkpoint whose manifest must match.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<serde_json::Value> {
    let (loaded, meta) = load(path)?;
    check_manifest(&store.manifest(), &loaded.manifest())?;
    store.copy_from(&loaded)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add("a.weight", Array::matrix(2, 2, vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0]).unwrap());
        s.add("b", Array::vector(vec![7.0, 8.0, 9.0]));
        let mut buf = Vec::new();
        write(&mut buf, &s, serde_json::json!({"step": 3})).unwrap();
        let (r, meta) = read(&buf[..]).unwrap();
        assert_eq!(meta["step"], 3);
        assert_eq!(r.manifest(), s.manifest());
        for ((_, x), (_, y)) in r.iter().zip(s.iter()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(r.content_hash(), s.content_hash());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Array::vector(vec![1.0, 2.0]));
        let mut buf = Vec::new();
        write(&mut buf, &s, serde_json::Value::Null).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(read(&buf[..]), Err(Error::Checkpoint(_))));
    }
}
