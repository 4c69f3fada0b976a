//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `b"IDHDR1"`, `u32` header length, JSON header, `u32` array count, then per
//! array: `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims,
//! `f32` data.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::nn::VarStore;
use crate::cli::fsutil::write_atomic;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"IDHDR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub arch: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(header: &Header, store: &VarStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let json = serde_json::to_vec(header)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for name in store.names() {
        let var = store.get(name).expect("name from store");
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(var.rank() as u32).to_le_bytes());
        for &d in var.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let data: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], dtype: DType) -> Result<(Header, VarStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u32()?;
    let mut store = VarStore::new(dtype);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(data, dims, &Device::Cpu)?.to_dtype(dtype)?;
        store.insert(name, Var::from_tensor(&t)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok((header, store))
}

pub fn save(path: &Path, header: &Header, store: &VarStore) -> Result<()> {
    write_atomic(path, &encode(header, store)?)
}

pub fn load(path: &Path, dtype: DType) -> Result<(Header, VarStore)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, dtype).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::nn::{Builder, Conv3, Dense};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = VarStore::new(DType::F32);
        {
            let mut b = Builder::new(&mut store, 3, true);
            Conv3::new(&mut b, "c", 3, 4, 1.0).unwrap();
            Dense::new(&mut b, "fc", 5, 2, 1.0).unwrap();
        }
        let header = Header {
            kind: "test".into(),
            arch: serde_json::json!({"width": 4}),
            meta: serde_json::Value::Null,
        };
        let bytes = encode(&header, &store).unwrap();
        assert_eq!(&bytes[..6], MAGIC);
        let (h2, s2) = decode(&bytes, DType::F32).unwrap();
        assert_eq!(h2, header);
        let a = store.snapshot().unwrap();
        let b = s2.snapshot().unwrap();
        assert_eq!(a.len(), b.len());
        for (k, v) in &a {
            let w = &b[k];
            assert!(v.iter().zip(w).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode(&h2, &s2).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let store = VarStore::new(DType::F32);
        let header = Header {
            kind: "x".into(),
            arch: serde_json::Value::Null,
            meta: serde_json::Value::Null,
        };
        let mut bytes = encode(&header, &store).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], DType::F32).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes, DType::F32).is_err());
    }
}
