//! DFTE checkpoints: `b"DFTE"`, u32 version, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and
//! little-endian f64 data. All integers little-endian.

use std::fs;
use std::path::Path;

use dualfete_core::{ModelParams, Tensor};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"DFTE";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.num_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<ModelParams, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?.to_owned();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        entries.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    ModelParams::new(entries).map_err(|e| e.to_string())
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let buf = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&buf).map_err(|detail| HarnessError::Format { path: path.into(), detail })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualfete_core::segnet::{self, NetConfig};

    #[test]
    fn roundtrip_is_bitwise() {
        let p = segnet::build(&NetConfig::default(), 3).unwrap();
        let back = decode(&encode(&p)).unwrap();
        assert_eq!(back, p);
        assert!(back.flatten().iter().zip(p.flatten()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_corruption() {
        let p = segnet::build(&NetConfig { height: 8, width: 8, base_channels: 1, depth: 1, ..Default::default() }, 0).unwrap();
        let buf = encode(&p);
        assert!(decode(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = buf;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
