//! Binary tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SODETR1"
//! repeated until EOF:
//!   u32 name_len, name (UTF-8)
//!   u32 rank, rank × u64 dims
//!   product(dims) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"SODETR1";

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in entries {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = bytes;
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| Error::Parse("checkpoint too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Parse("bad checkpoint magic".into()));
    }
    let mut entries = Vec::new();
    while !r.is_empty() {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| truncated())?;
        let name = String::from_utf8(name).map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| truncated())?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        if r.len() < n * 8 {
            return Err(truncated());
        }
        let data = r[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        r = &r[n * 8..];
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

fn truncated() -> Error {
    Error::Parse("truncated checkpoint".into())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u32::from_le_bytes(b))
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_stable() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&[("ab".into(), t.clone())]);
        let mut expected = b"SODETR1".to_vec();
        expected.extend([2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].0, "ab");
        assert_eq!(back[0].1.data(), t.data());
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOTMAGIC").is_err());
        let mut bytes = encode(&[("w".into(), Tensor::zeros(&[3]))]);
        bytes.truncate(bytes.len() - 1);
        assert!(decode(&bytes).is_err());
    }
}
