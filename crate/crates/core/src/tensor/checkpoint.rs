//! Flat binary parameter container.
//!
//! Layout: the 6 magic bytes `SSLAB1`, then one record per tensor until end
//! of file. A record is the name length (u64), the UTF-8 name bytes, the rank
//! (u64), each extent (u64) and finally the values (f64). All integers and
//! reals are little-endian.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SSLAB1";

pub fn encode_checkpoint<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 6 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(bad("missing SSLAB1 magic"));
    }
    let mut r = Reader { bytes, pos: 6 };
    let truncated = || bad("truncated record");
    let mut entries = Vec::new();
    while !r.at_end() {
        let name_len = r.u64().ok_or_else(truncated)? as usize;
        if name_len > 4096 {
            return Err(bad("implausible name length"));
        }
        let name = std::str::from_utf8(r.take(name_len).ok_or_else(truncated)?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        let rank = r.u64().ok_or_else(truncated)? as usize;
        if rank == 0 || rank > 8 {
            return Err(bad("implausible rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0 && n <= bytes.len() / 8)
            .ok_or_else(|| bad("implausible extents"))?;
        let data = r
            .take(n * 8)
            .ok_or_else(truncated)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

pub fn write_checkpoint<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    fs::write(path, encode_checkpoint(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_fixed() {
        let t = Tensor::vector(vec![1.5]);
        let bytes = encode_checkpoint([("w", &t)]);
        let mut expected = b"SSLAB1".to_vec();
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("x");
        assert!(decode_checkpoint(b"NOPE", p).is_err());
        let mut bytes = encode_checkpoint([("w", &Tensor::vector(vec![1.0, 2.0]))]);
        bytes.pop();
        assert!(decode_checkpoint(&bytes, p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 1usize..5,
            cols in 1usize..5,
            bits in proptest::collection::vec(any::<u64>(), 25),
        ) {
            let data: Vec<f64> = bits[..rows * cols].iter().map(|&b| f64::from_bits(b)).collect();
            let t = Tensor::new(&[rows, cols], data).unwrap();
            let s = Tensor::scalar(-0.0);
            let bytes = encode_checkpoint([("block0.w_in", &t), ("meta.x", &s)]);
            let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, "block0.w_in");
            prop_assert_eq!(back[0].1.shape(), t.shape());
            for (a, b) in back[0].1.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back[1].1.data()[0].to_bits(), (-0.0f64).to_bits());
            prop_assert_eq!(encode_checkpoint(back.iter().map(|(n, t)| (n.as_str(), t))), bytes);
        }
    }
}
