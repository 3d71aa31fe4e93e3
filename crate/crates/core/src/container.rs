//! Single-file tensor container: magic, format version, JSON header, named
//! tensor blobs, SHA-256 trailer over everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DIGEST_LEN: usize = 32;

pub fn write(path: &Path, magic: &[u8; 8], version: u32, header: &serde_json::Value, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&version.to_le_bytes());
    let header = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let flat = t.flatten_all()?;
        let tag: u8 = match t.dtype() {
            DType::F32 => 0,
            DType::F64 => 1,
            other => return Err(Error::InvalidValue(format!("unsupported dtype {other:?} for {name}"))),
        };
        buf.push(tag);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.dims() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match tag {
            0 => flat.to_vec1::<f32>()?.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    // write-then-rename so readers never observe a partial file
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: "unexpected end of data".into(),
            });
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

pub struct Contents {
    pub header: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn read(path: &Path, magic: &[u8; 8], supported_version: u32) -> Result<Contents> {
    let buf = std::fs::read(path)?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if buf.len() < magic.len() + 4 + DIGEST_LEN || &buf[..8] != magic {
        return Err(corrupt("not a recognized container"));
    }
    let (body, trailer) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(corrupt("checksum mismatch"));
    }
    let mut cur = Cursor { buf: body, pos: 8, path };
    let version = cur.u32()?;
    if version != supported_version {
        return Err(Error::VersionMismatch {
            found: version,
            expected: supported_version,
        });
    }
    let hlen = cur.u64()? as usize;
    let header: serde_json::Value = serde_json::from_slice(cur.take(hlen)?)?;
    let count = cur.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(nlen)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let tag = cur.take(1)?[0];
        let rank = cur.u32()? as usize;
        let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match tag {
            0 => {
                let v: Vec<f32> = cur.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let v: Vec<f64> = cur.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            _ => return Err(corrupt("unknown dtype tag")),
        };
        tensors.insert(name, t);
    }
    if cur.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Contents { header, tensors })
}
