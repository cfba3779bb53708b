//! Named-tensor checkpoint files.
//!
//! Layout (little-endian): magic `VCC1`, u16 version, u32 tensor count, then
//! per tensor a u32 name length, UTF-8 name, u32 rank, u32 dims and f64 data.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VCC1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if expected != Some(data.len()) {
            return Err(Error::Malformed(format!("tensor {name}: dims {dims:?} do not match {} values", data.len())));
        }
        Ok(Self { name, dims, data })
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::DimOverflow(format!("{what} {n} exceeds u32")))
}

pub fn write_checkpoint(tensors: &[Tensor], w: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&u32_of(t.name.len(), "name length")?.to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&u32_of(t.dims.len(), "rank")?.to_le_bytes());
        for &d in &t.dims {
            buf.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for &x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::DimOverflow(what.into()))?;
        let out = self.bytes.get(self.pos..end).ok_or(Error::Truncated(what))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let v = cur.take(2, "version")?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|e| Error::Malformed(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rank = cur.u32("rank")?;
        let dims = (0..rank).map(|_| cur.u32("dims")).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::DimOverflow(format!("tensor {name} dims {dims:?}")))?;
        let raw = cur.take(len * 8, "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push(Tensor { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(tensors)
}

pub fn save_checkpoint(tensors: &[Tensor], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(tensors, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Tensor>> {
    parse_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let ts = vec![
            Tensor::new("a", vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap(),
            Tensor::new("scalar", vec![], vec![42.0]).unwrap(),
            Tensor::new("empty", vec![0, 4], vec![]).unwrap(),
        ];
        let mut bytes = Vec::new();
        write_checkpoint(&ts, &mut bytes).unwrap();
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for (x, y) in ts.iter().zip(&back) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.dims, y.dims);
            let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn header_layout() {
        let mut bytes = Vec::new();
        write_checkpoint(&[Tensor::new("w", vec![1], vec![1.0]).unwrap()], &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"VCC1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[1, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[1, 0, 0, 0]);
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes.len(), 4 + 2 + 4 + 4 + 1 + 4 + 4 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        write_checkpoint(&[Tensor::new("w", vec![2], vec![1.0, 2.0]).unwrap()], &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(parse_checkpoint(&extra), Err(Error::Malformed(_))));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(parse_checkpoint(&ver), Err(Error::UnsupportedVersion(9))));
        assert!(Tensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }
}
