//! FTNS binary tensor blocks.
//!
//! Layout (all little-endian): `b"FTNS"`, version `u16`, rank `u16`, `rank`
//! dimensions as `u64`, then the `f32` payload in row-major order.

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTNS";
pub const VERSION: u16 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u16).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 4 * t.len());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

/// Reader that tracks its byte offset for error messages.
pub struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    pub fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    pub fn with_offset(inner: R, offset: u64) -> Self {
        Cursor { inner, offset }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Parse {
                        offset: self.offset + filled as u64,
                        msg: format!("truncated input while reading {what}"),
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(Error::Parse {
                        offset: self.offset + filled as u64,
                        msg: format!("{what}: {e}"),
                    })
                }
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// True when no bytes remain.
    pub fn at_end(&mut self) -> Result<bool> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(true),
            Ok(_) => Err(Error::Parse {
                offset: self.offset,
                msg: "unexpected trailing bytes".into(),
            }),
            Err(e) => Err(Error::Parse {
                offset: self.offset,
                msg: e.to_string(),
            }),
        }
    }
}

pub fn read_tensor<R: Read>(c: &mut Cursor<R>) -> Result<Tensor<f32>> {
    let start = c.offset();
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic, "FTNS magic")?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            offset: start,
            msg: format!("bad magic {magic:?}, expected \"FTNS\""),
        });
    }
    let mut b2 = [0u8; 2];
    c.read_exact(&mut b2, "FTNS version")?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(Error::Version {
            what: "FTNS",
            found: version.into(),
            expected: VERSION.into(),
        });
    }
    c.read_exact(&mut b2, "FTNS rank")?;
    let rank = u16::from_le_bytes(b2) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        c.read_exact(&mut b8, "FTNS dimension")?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Parse {
            offset: start,
            msg: format!("dimension product overflows: {shape:?}"),
        })?;
    let mut payload = vec![0u8; n * 4];
    c.read_exact(&mut payload, "FTNS payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(&shape, data)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut c = Cursor::new(bytes);
    let t = read_tensor(&mut c)?;
    c.at_end()?;
    Ok(t)
}

pub fn save(path: &std::path::Path, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &std::path::Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut s = crate::rng::Rng::new(seed).stream("ftns");
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(s.next_u64() as u32)).collect();
            let t = Tensor::new(&dims, data).unwrap();
            let back = from_bytes(&to_bytes(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let t = Tensor::new(&[2, 3], vec![1.0f32; 6]).unwrap();
        let bytes = to_bytes(&t);
        let cut = &bytes[..bytes.len() - 5];
        match from_bytes(cut) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(&b[..4], b"FTNS");
        assert_eq!(&b[4..6], &1u16.to_le_bytes());
        assert_eq!(&b[6..8], &1u16.to_le_bytes());
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn future_version_requires_upgrade() {
        let mut b = to_bytes(&Tensor::new(&[1], vec![0.0f32]).unwrap());
        b[4] = 9;
        assert!(matches!(from_bytes(&b), Err(Error::Version { found: 9, .. })));
    }
}
