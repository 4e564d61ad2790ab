//! Binary feature-map dumps.
//!
//! Layout, all little-endian: magic `FMAP`, u16 version, u16 ndims, ndims u32
//! dimensions `(H, W, C)`, f32 stride, then `H * W * C` f32 values in
//! row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureMap;

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const VERSION: u16 = 1;

pub fn encode(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * map.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&3u16.to_le_bytes());
    for d in [map.height(), map.width(), map.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&map.stride().to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!(
                "truncated: need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<FeatureMap, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic (expected FMAP)".into());
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let ndims = r.u16("ndims")?;
    if ndims != 3 {
        return Err(format!("expected 3 dimensions (H, W, C), got {ndims}"));
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    let stride = r.f32("stride")?;
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or("dimensions overflow")?;
    let body = r.take(n.checked_mul(4).ok_or("dimensions overflow")?, "data")?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes after data", bytes.len() - r.pos));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FeatureMap::new(h, w, c, stride, data).map_err(|e| e.to_string())
}

pub fn read(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

pub fn write(path: &Path, map: &FeatureMap) -> Result<()> {
    std::fs::write(path, encode(map)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> FeatureMap {
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.25 - 1.0).collect();
        FeatureMap::new(2, 2, 3, 16.0, data).unwrap()
    }

    #[test]
    fn header_layout() {
        let b = encode(&map());
        assert_eq!(&b[..4], b"FMAP");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 3);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 16.0);
        assert_eq!(b.len(), 24 + 12 * 4);
    }

    #[test]
    fn round_trip() {
        assert_eq!(decode(&encode(&map())).unwrap(), map());
    }

    #[test]
    fn truncated_body_is_an_error() {
        // 2x2x3 declared, 11 floats present
        let b = encode(&map());
        let err = decode(&b[..b.len() - 4]).unwrap_err();
        assert!(err.contains("truncated"), "{err}");
        assert!(decode(&b[..10]).unwrap_err().contains("truncated"));
    }

    #[test]
    fn rejects_bad_header_and_trailing_bytes() {
        let mut b = encode(&map());
        b[0] = b'X';
        assert!(decode(&b).unwrap_err().contains("magic"));
        let mut b = encode(&map());
        b[4] = 2;
        assert!(decode(&b).unwrap_err().contains("version"));
        let mut b = encode(&map());
        b.push(0);
        assert!(decode(&b).unwrap_err().contains("trailing"));
    }
}
