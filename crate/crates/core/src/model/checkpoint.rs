//! `GDCK` parameter files: magic, u32 count, then per parameter a u16 name
//! length, the name, a u8 rank, u32 dims and an f32 payload, all
//! little-endian. Values are rounded to f32 on save.

use std::path::Path;

use super::ModelError;
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GDCK";

pub fn save_checkpoint(store: &ParamStore) -> Result<Vec<u8>, ModelError> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| ModelError::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.at + n;
        if end > self.buf.len() {
            return Err(ModelError::Checkpoint(format!("truncated: need {end} bytes, file has {}", self.buf.len())));
        }
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ParamStore, ModelError> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data =
            r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let t = Tensor::new(shape, data).map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
        if store.get(&name).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.insert(name, t);
    }
    if r.at != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(store)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<(), ModelError> {
    std::fs::write(path, save_checkpoint(store)?)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    load_checkpoint(&bytes)
}
