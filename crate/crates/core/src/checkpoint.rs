//! `CMAS` binary container for named f64 tensors.
//!
//! Layout: magic `CMAS`, u32 version, then records until end of file. Each
//! record is u32 name length, UTF-8 name, u32 rank, rank × u64 dims and the
//! little-endian f64 payload. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMAS";
pub const VERSION: u32 = 1;

/// Serializes `(name, tensor)` records in the given order.
pub fn encode<'a, I>(records: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a container, preserving record order.
pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "checkpoint header")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            found: u32::from_be_bytes(magic.try_into().unwrap()),
        });
    }
    let version = r.u32("checkpoint header")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let len = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| Error::MalformedCheckpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("record dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::MalformedCheckpoint(format!("`{name}` has absurd dims {shape:?}")))?
            / 8;
        let bytes = r.take(numel * 8, "record payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::MalformedCheckpoint(format!("`{name}`: {e}")))?;
        if out.iter().any(|(n, _): &(String, Tensor)| *n == name) {
            return Err(Error::MalformedCheckpoint(format!("duplicate record `{name}`")));
        }
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_file<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let bytes = encode(records);
    let mut f = fs::File::create(path).map_err(Error::file(path))?;
    f.write_all(&bytes).map_err(Error::file(path))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path).map_err(Error::file(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a/w".into(), Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
            ("a/b".into(), Tensor::vector(vec![-0.0, 7.0])),
            ("s".into(), Tensor::scalar(0.1)),
        ]
    }

    fn enc(recs: &[(String, Tensor)]) -> Vec<u8> {
        encode(recs.iter().map(|(n, t)| (n.as_str(), t)))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let recs = sample();
        let back = decode(&enc(&recs)).unwrap();
        assert_eq!(back.len(), recs.len());
        for ((n1, t1), (n2, t2)) in recs.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = enc(&sample()[2..]);
        assert_eq!(&bytes[..4], b"CMAS");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..13], b"s");
        // rank 1, dim 1, one f64
        assert_eq!(bytes.len(), 13 + 4 + 8 + 8);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = enc(&sample());
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn wrong_version() {
        let mut bytes = enc(&sample());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = enc(&sample());
        for cut in [2, 6, 10, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }
    }

    #[test]
    fn empty_container() {
        assert!(decode(&enc(&[])).unwrap().is_empty());
    }
}
