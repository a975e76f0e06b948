//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "LACTCKPT"
//! version   u32
//! config    u32 length + JSON-encoded ModelConfig
//! precision u32 length + "f32" | "f64"
//! count     u32
//! tensors   count x { u32 name length, name, u32 rank, rank x u64 extent, raw values }
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::math::{Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LACTCKPT";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

pub fn encode<T: Real>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_bytes(&mut out, &serde_json::to_vec(&params.config)?);
    put_bytes(&mut out, T::TAG.as_bytes());
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_bytes(&mut out, name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err("truncated file".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn decode<T: Real>(buf: &[u8]) -> std::result::Result<ModelParams<T>, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes()?).map_err(|e| e.to_string())?;
    let tag = std::str::from_utf8(r.bytes()?).map_err(|e| e.to_string())?;
    if tag != T::TAG {
        return Err(format!("checkpoint holds {tag} values, requested {}", T::TAG));
    }
    let skeleton = ModelParams::<T>::init(&config, 0).map_err(|e| e.to_string())?;
    let expected = skeleton.tensors();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(format!("expected {} tensors, found {count}", expected.len()));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, _) in &expected {
        let name = std::str::from_utf8(r.bytes()?).map_err(|e| e.to_string())?;
        if name != want_name {
            return Err(format!("expected tensor {want_name}, found {name}"));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * T::BYTES)?;
        let data = raw.chunks(T::BYTES).map(T::read_le).collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| e.to_string())?);
    }
    if r.pos != buf.len() {
        return Err("trailing bytes after tensors".into());
    }
    skeleton.with_tensors(tensors).map_err(|e| e.to_string())
}

pub fn save_checkpoint<T: Real>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 9).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q: ModelParams<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        let toks = vec![vec![1, 5, 9, 77]];
        assert_eq!(forward(&p, &toks, false).unwrap().logits, forward(&q, &toks, false).unwrap().logits);
        assert_eq!(encode(&q).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn rejects_wrong_precision_and_garbage() {
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 0).unwrap();
        let bytes = encode(&p).unwrap();
        assert!(decode::<f64>(&bytes).is_err());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f32>(b"nonsense").is_err());
        let mut bumped = bytes.clone();
        bumped[8] = 2;
        assert!(decode::<f32>(&bumped).unwrap_err().contains("version"));
    }
}
