//! Named-tensor checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CLFTCKPT" | version: u16 | count: u32 |
//!   count x ( name_len: u32 | name: UTF-8 | ndim: u8 | dims: ndim x u32 | data: f32 x prod(dims) ) |
//! crc32: u32 over every preceding byte
//! ```
//!
//! Entries are written in lexicographic name order, so equal maps give equal
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLFTCKPT";
pub const VERSION: u16 = 1;

pub type Entries = BTreeMap<String, Tensor>;

pub fn to_bytes(entries: &Entries) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| too_big("entry count"))?.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&u32::try_from(name.len()).map_err(|_| too_big(name))?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.shape().len()).map_err(|_| too_big(name))?);
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big(name))?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn too_big(what: &str) -> Error {
    Error::Contract(format!("{what} exceeds the checkpoint field width"))
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format("checkpoint", format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Entries> {
    if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
        return Err(Error::format("checkpoint", "file too short"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::format(
            "checkpoint",
            format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut c = Cursor {
        buf: payload,
        pos: MAGIC.len(),
    };
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Entries::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format("checkpoint", "entry name is not UTF-8"))?
            .to_string();
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::format("checkpoint", format!("entry {name:?} out of order")));
        }
        let ndim = c.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
        prev = Some(name.clone());
        entries.insert(name, t);
    }
    if c.pos != payload.len() {
        return Err(Error::format("checkpoint", "trailing bytes after last entry"));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &Entries) -> Result<()> {
    write_atomic(path, &to_bytes(entries)?)
}

pub fn load(path: &Path) -> Result<Entries> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format { kind, reason } => Error::Format {
            kind,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}
