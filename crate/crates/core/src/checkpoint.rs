//! Binary tensor container used for checkpoints and trace dumps.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CLUE"  u32 version=1  u32 count
//! count × { u16 name_len, name (UTF-8), u8 dtype, u8 rank, u32 dims[rank], payload }
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u8, 3 = u32, 4 = u64.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"CLUE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U8(_) => DType::U8,
            Payload::U32(_) => DType::U32,
            Payload::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U32(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: &[usize], payload: Payload) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != payload.len() {
            return Err(Error::Dimension(format!(
                "entry {name}: dims {dims:?} hold {} values, payload has {}",
                dims.iter().product::<usize>(),
                payload.len()
            )));
        }
        Ok(Entry {
            name,
            dims: dims.to_vec(),
            payload,
        })
    }

    pub fn tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.f64() as f32).collect()),
            _ => Payload::F64(t.data().iter().map(|v| v.f64()).collect()),
        };
        Entry {
            name: name.into(),
            dims: t.shape().to_vec(),
            payload,
        }
    }

    pub fn text(name: impl Into<String>, s: &str) -> Self {
        let bytes = s.as_bytes().to_vec();
        Entry {
            name: name.into(),
            dims: vec![bytes.len()],
            payload: Payload::U8(bytes),
        }
    }

    /// Floating entry as a tensor of `T`; the stored width must match `T`.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.payload, T::DTYPE) {
            (Payload::F32(v), DType::F32) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            (Payload::F64(v), DType::F64) => v.iter().map(|&x| T::lit(x)).collect(),
            (p, want) => {
                return Err(Error::Format(format!(
                    "entry {} has dtype {:?}, expected {want:?}",
                    self.name,
                    p.dtype()
                )))
            }
        };
        if self.dims.is_empty() {
            return Ok(Tensor::scalar(data[0]));
        }
        Tensor::from_vec(&self.dims, data)
    }

    pub fn as_text(&self) -> Result<String> {
        match &self.payload {
            Payload::U8(v) => String::from_utf8(v.clone())
                .map_err(|_| Error::Format(format!("entry {} is not UTF-8", self.name))),
            _ => Err(Error::Format(format!("entry {} is not text", self.name))),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.payload {
            Payload::U32(v) => Ok(v),
            _ => Err(Error::Format(format!("entry {} is not u32", self.name))),
        }
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match &self.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(Error::Format(format!("entry {} is not u64", self.name))),
        }
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("entry name too long: {}", e.name)))?;
        let rank = u8::try_from(e.dims.len())
            .map_err(|_| Error::Format(format!("entry {} has too many dims", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.payload.dtype() as u8);
        out.push(rank);
        for &d in &e.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("entry {} dim too large", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a CLUE container".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("entry {name}: unknown dtype {code}")))?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("entry {name}: size overflow")))?;
        let bytes = r.take(
            len.checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("entry {name}: size overflow")))?,
        )?;
        let payload = match dtype {
            DType::F32 => Payload::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => Payload::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => Payload::U8(bytes.to_vec()),
            DType::U32 => Payload::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U64 => Payload::U64(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        entries.push(Entry { name, dims, payload });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after last entry", buf.len() - r.pos)));
    }
    Ok(entries)
}

/// Write atomically: a temporary sibling is renamed over `path`.
pub fn write(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode(entries)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("missing entry {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Entry> {
        vec![
            Entry::new("a", &[2, 2], Payload::F32(vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5])).unwrap(),
            Entry::new("b/c", &[3], Payload::F64(vec![1e-300, -2.0, 0.1])).unwrap(),
            Entry::text("__config__", "k=v\n"),
            Entry::new("ids", &[2], Payload::U32(vec![7, u32::MAX])).unwrap(),
            Entry::new("h", &[1], Payload::U64(vec![u64::MAX - 3])).unwrap(),
        ]
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[Entry::new("x", &[1], Payload::F32(vec![1.0])).unwrap()]).unwrap();
        assert_eq!(&bytes[..4], b"CLUE");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'x');
        assert_eq!(bytes[15], 0);
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
        assert_eq!(&bytes[21..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip_is_exact() {
        let e = sample();
        let bytes = encode(&e).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        match &back[0].payload {
            Payload::F32(v) => assert_eq!(v[1].to_bits(), (-0.0f32).to_bits()),
            _ => panic!(),
        }
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
    }
}
