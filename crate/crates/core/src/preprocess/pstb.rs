//! PSTB: a flat binary container of named f64 tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "PSTB1\0"
//! u64      entry count
//! entry*   u32 name length, UTF-8 name, u8 dtype (1 = f64), u8 rank,
//!          rank x u64 extents, product(extents) x f64 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{io_err, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 6] = b"PSTB1\0";
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PstbError {
    #[error("not a PSTB file (bad magic)")]
    BadMagic,
    #[error("truncated PSTB data while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("entry `{name}` declares {declared} elements but rank/extents are invalid")]
    SizeMismatch { name: String, declared: usize },
    #[error("tensor names must be non-empty")]
    EmptyName,
    #[error("tensor name is not valid UTF-8")]
    BadUtf8,
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
}

/// Encodes named tensors into a PSTB byte buffer.
pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    let mut seen = std::collections::HashSet::new();
    for (name, t) in entries {
        if name.is_empty() {
            return Err(PstbError::EmptyName.into());
        }
        if !seen.insert(name.as_str()) {
            return Err(PstbError::DuplicateName(name.clone()).into());
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], PstbError> {
        if self.buf.len() - self.pos < n {
            return Err(PstbError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, PstbError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, PstbError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, PstbError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a PSTB byte buffer, preserving entry order.
pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if buf.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(buf) {
            PstbError::Truncated("magic")
        } else {
            PstbError::BadMagic
        }
        .into());
    }
    if &buf[..MAGIC.len()] != MAGIC {
        return Err(PstbError::BadMagic.into());
    }
    let mut c = Cursor {
        buf,
        pos: MAGIC.len(),
    };
    let count = c.u64("entry count")?;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        if len == 0 {
            return Err(PstbError::EmptyName.into());
        }
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| PstbError::BadUtf8)?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(PstbError::DuplicateName(name).into());
        }
        let dtype = c.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(PstbError::UnknownDtype(dtype).into());
        }
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let declared = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| (1..=MAX_RANK).contains(&rank) && n > 0);
        let Some(n) = declared else {
            return Err(PstbError::SizeMismatch {
                name,
                declared: shape.iter().product(),
            }
            .into());
        };
        let bytes = n
            .checked_mul(8)
            .ok_or(PstbError::Truncated("payload"))?;
        let payload = c.take(bytes, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(PstbError::TrailingBytes(buf.len() - c.pos).into());
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    decode(&buf)
}

/// Looks up an entry by name.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn pstb_err(r: Result<Vec<(String, Tensor)>>) -> PstbError {
        match r {
            Err(Error::Pstb(e)) => e,
            other => panic!("expected a PSTB error, got {other:?}"),
        }
    }

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("eeg".into(), Tensor::new([2, 3], vec![1.0, -2.5, 0.0, 1e-300, f64::MAX, -0.0]).unwrap()),
            ("labels".into(), Tensor::vector(&[0.0, 1.0]).unwrap()),
        ]
    }

    #[test]
    fn byte_layout() {
        let bytes = encode(&[("ab".into(), Tensor::vector(&[1.5]).unwrap())]).unwrap();
        let mut want = b"PSTB1\0".to_vec();
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&[1, 1]);
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let entries = sample();
        let back = decode(&encode(&entries).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn empty_container() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), MAGIC.len() + 8);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn rejects_empty_names() {
        let e = encode(&[(String::new(), Tensor::scalar(1.0))]);
        assert!(matches!(e, Err(Error::Pstb(PstbError::EmptyName))));
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert_eq!(pstb_err(decode(&bytes)), PstbError::EmptyName);
    }

    #[test]
    fn detects_every_truncation() {
        let bytes = encode(&sample()).unwrap();
        for cut in 0..bytes.len() {
            let e = pstb_err(decode(&bytes[..cut]));
            assert!(matches!(e, PstbError::Truncated(_)), "cut {cut}: {e:?}");
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert_eq!(pstb_err(decode(&bytes)), PstbError::BadMagic);

        let mut bytes = encode(&[("a".into(), Tensor::scalar(1.0))]).unwrap();
        let dtype_at = 6 + 8 + 4 + 1;
        bytes[dtype_at] = 7;
        assert_eq!(pstb_err(decode(&bytes)), PstbError::UnknownDtype(7));

        let mut bytes = encode(&[("a".into(), Tensor::scalar(1.0))]).unwrap();
        bytes[6 + 8 + 4] = 0xff;
        assert_eq!(pstb_err(decode(&bytes)), PstbError::BadUtf8);

        let mut bytes = encode(&[("a".into(), Tensor::scalar(1.0))]).unwrap();
        bytes[dtype_at + 1] = 0;
        assert!(matches!(pstb_err(decode(&bytes)), PstbError::SizeMismatch { .. }));

        let mut bytes = encode(&sample()).unwrap();
        bytes.push(0);
        assert_eq!(pstb_err(decode(&bytes)), PstbError::TrailingBytes(1));

        let dup = vec![("a".into(), Tensor::scalar(1.0)), ("a".into(), Tensor::scalar(2.0))];
        assert!(matches!(encode(&dup), Err(Error::Pstb(PstbError::DuplicateName(_)))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pstb");
        save(&path, &sample()).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(
            shape in prop::collection::vec(1usize..4, 1..=4),
            seed in any::<u64>(),
            name in "[a-z._0-9]{1,12}",
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n as u64)
                .map(|i| f64::from_bits(seed.wrapping_mul(i + 1).rotate_left(7)))
                .map(|v| if v.is_nan() { 0.5 } else { v })
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&[(name.clone(), t.clone())]).unwrap()).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(&back[0].1, &t);
        }
    }
}
