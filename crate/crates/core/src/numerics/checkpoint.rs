//! Binary checkpoint format.
//!
//! ```text
//! magic    4 bytes  "SRPC"
//! version  u32 LE   currently 1
//! count    u32 LE   number of tensors
//! repeated count times:
//!   name_len u32 LE
//!   name     name_len bytes, UTF-8
//!   rank     u32 LE
//!   extents  rank × u64 LE
//!   data     product(extents) × f32 LE
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SRPC";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    write_to(&mut out, tensors).expect("writing to a Vec cannot fail");
    out
}

pub fn write_to<W: Write>(w: &mut W, tensors: &[(String, Tensor<f32>)]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn read_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4, what)?.try_into().unwrap()))
}

pub fn decode(mut buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let buf = &mut buf;
    if take(buf, 4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(buf, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(buf, "count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(buf, "name length")? as usize;
        let name = std::str::from_utf8(take(buf, len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = read_u32(buf, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = u64::from_le_bytes(take(buf, 8, "extent")?.try_into().unwrap());
            shape.push(e as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(buf, n * 4, "data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if !buf.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("w".into(), Tensor::vector(vec![1.0]))]);
        assert_eq!(&bytes[..4], b"SRPC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 4 + 1 + 4 + 8 + 4);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&[("w".into(), Tensor::vector(vec![1.0, 2.0]))]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            entries in proptest::collection::vec(
                ("[a-z.]{1,12}", proptest::collection::vec(1usize..4, 1..3), any::<u32>()),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor<f32>)> = entries
                .into_iter()
                .map(|(name, shape, seed)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|i| f32::from_bits(seed.wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
                    (name, Tensor::new(shape, data).unwrap())
                })
                .collect();
            let back = decode(&encode(&tensors)).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in back.iter().zip(&tensors) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
