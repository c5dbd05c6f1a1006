//! Binary parameter container.
//!
//! Layout: the 5-byte magic `RREG1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the concatenated little-endian `f64` payloads.
//! The header lists every tensor as `{name, shape, offset}` with `offset`
//! counted in `f64` elements from the start of the payload, plus a free-form
//! `meta` object.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"RREG1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn to_bytes(params: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing RREG1 magic"));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[5..13]);
    let hlen = u64::from_le_bytes(len) as usize;
    let body = 13usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[13..body])?;
    let payload = &bytes[body..];
    if !payload.len().is_multiple_of(8) {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset * 8, (e.offset + n) * 8);
        if end > payload.len() {
            return Err(bad(&format!("tensor {} runs past the payload", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok((store, header.meta))
}

pub fn save(path: &Path, params: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, to_bytes(params, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let mut p = ParamStore::new();
        p.insert("encoder/w", Tensor::matrix(2, 3, vec![0.1, -2.5, 1e-300, f64::MAX, -0.0, 3.0]).unwrap());
        p.insert("decoder/b", Tensor::row(vec![std::f64::consts::PI]));
        let meta = serde_json::json!({"window": 10});
        let bytes = to_bytes(&p, &meta).unwrap();
        assert_eq!(&bytes[..5], b"RREG1");
        let (q, m) = from_bytes(&bytes).unwrap();
        assert_eq!(m, meta);
        for (name, t) in p.iter() {
            let u = q.value(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = u.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert_eq!(from_bytes(b"RREG0\0\0\0\0\0\0\0\0").unwrap_err().kind(), "Checkpoint");
        let mut p = ParamStore::new();
        p.insert("x", Tensor::row(vec![1.0, 2.0]));
        let bytes = to_bytes(&p, &serde_json::Value::Null).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
