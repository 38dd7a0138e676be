//! Checkpoint container shared by the backbone and the policy networks.
//!
//! Layout, little-endian: magic `LACCKPT1`; u32 length + UTF-8 JSON header
//! (`{"kind": ..., "config": ...}`); u32 tensor count; then per tensor a
//! u32 name length, the name, u32 rank, u32 dims, and the f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"LACCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(skip)]
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(self)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        fill(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let len = u32_le(&mut r)? as usize;
        let mut header = vec![0u8; len];
        fill(&mut r, &mut header)?;
        let mut ck: Checkpoint = serde_json::from_slice(&header)?;
        let count = u32_le(&mut r)?;
        for _ in 0..count {
            let nlen = u32_le(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            fill(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = u32_le(&mut r)? as usize;
            let shape = (0..rank).map(|_| u32_le(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; 4 * n];
            fill(&mut r, &mut buf)?;
            let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            ck.params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ck)
    }
}

fn fill(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn u32_le(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    ck.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, kind: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let ck = Checkpoint::read_from(BufReader::new(File::open(path)?))?;
    if ck.kind != kind {
        return Err(Error::Format(format!(
            "{} holds a `{}` checkpoint, expected `{kind}`",
            path.display(),
            ck.kind
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::from_fn([2, 3], |i| i as f32 * 0.1 - 0.2));
        params.insert("b", Tensor::vector(vec![f32::MIN_POSITIVE, -0.0]));
        let ck = Checkpoint {
            kind: "backbone".into(),
            config: serde_json::json!({"dim": 4}),
            params,
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        assert_eq!(back.params.digest(), ck.params.digest());
        assert_eq!(back, ck);
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
    }
}
