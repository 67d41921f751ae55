//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian: 8-byte magic, `u32` version, `u64`
//! length plus JSON model config, `u64` tensor count, then per tensor a
//! `u32` name length and UTF-8 name, a trainable byte, a `u32` rank, `u64`
//! dims and `f64` values.

use super::model::{ParamStore, ToyMaskFace, ToyModelConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MKFACE\0\x01";
pub const VERSION: u32 = 1;

pub fn encode(model: &ToyMaskFace) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.cfg)?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    let p = &model.params;
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    for ((name, t), &trainable) in p.names.iter().zip(&p.tensors).zip(&p.trainable) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(trainable as u8);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| corrupt(format!("length {v} overflows")))
    }
}

fn corrupt(detail: String) -> Error {
    Error::Format { what: "checkpoint", detail }
}

pub fn decode(bytes: &[u8]) -> Result<ToyMaskFace> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let n = r.u64()?;
    let cfg: ToyModelConfig = serde_json::from_slice(r.take(n)?)?;
    let mut model = ToyMaskFace::new(cfg)?;
    let count = r.u64()?;
    let mut store = ParamStore { names: Vec::with_capacity(count), tensors: Vec::with_capacity(count), trainable: Vec::with_capacity(count) };
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| corrupt(e.to_string()))?.to_string();
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(corrupt(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt(format!("tensor {name} too large")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt(format!("tensor {name} too large")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        store.names.push(name);
        store.tensors.push(Tensor::new(shape, data)?);
        store.trainable.push(trainable);
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if store.trainable != model.params.trainable {
        return Err(corrupt("trainable flags differ from the model layout".into()));
    }
    model.load_params(store)?;
    Ok(model)
}

pub fn save(path: &Path, model: &ToyMaskFace) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ToyMaskFace> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let cfg = ToyModelConfig { init_seed: 9, ..ToyModelConfig::default() };
        let mut model = ToyMaskFace::new(cfg).unwrap();
        model.params.tensors[7].data_mut()[0] = -1.0 / 3.0;
        let bytes = encode(&model).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let model = ToyMaskFace::new(ToyModelConfig::default()).unwrap();
        let bytes = encode(&model).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
