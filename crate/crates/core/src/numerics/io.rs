//! `DPAT` binary tensor records.
//!
//! Layout (all little-endian): magic `b"DPAT"`, `u32` version, `u32` rank,
//! `rank` × `u32` extents, then `numel` × `f64` payload.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DPAT";
pub const VERSION: u32 = 1;

pub fn write_record(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_record(&mut out, t);
    out
}

/// Cursor over a byte buffer that reports absolute offsets in errors.
pub struct RecordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RecordReader<'a> {
    pub fn new(bytes: &'a [u8], start: usize) -> Self {
        RecordReader { bytes, pos: start }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos.min(self.bytes.len()) < n {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len().saturating_sub(self.pos)
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read(&mut self) -> Result<Tensor> {
        let start = self.pos;
        if self.take(4, "magic")? != MAGIC {
            return Err(Error::format(start, "bad magic, expected \"DPAT\""));
        }
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                start + 4,
                format!("unsupported DPAT version {version}"),
            ));
        }
        let rank = self.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(start + 8, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.pos;
            let e = self.u32("extent")? as usize;
            if e == 0 {
                return Err(Error::format(at, "zero extent"));
            }
            shape.push(e);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::format(start, "extent product overflows"))?;
        let payload = self.take(numel.saturating_mul(8), "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(&shape, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = RecordReader::new(bytes, 0);
    let t = r.read()?;
    if !r.at_end() {
        return Err(Error::format(r.position(), "trailing bytes after record"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -0.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"DPAT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(b.len(), 4 + 4 + 4 + 8 + 16);
        assert_eq!(f64::from_le_bytes(b[20..28].try_into().unwrap()), 1.0);
    }

    #[test]
    fn truncation_names_offset() {
        let t = Tensor::zeros(&[3]);
        let b = encode(&t);
        let err = decode(&b[..b.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 16),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut b = encode(&Tensor::zeros(&[1]));
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let mut rng = Rng::seed_from(seed);
            let t = Tensor::randn(&dims, &mut rng);
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
