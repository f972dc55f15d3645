//! Flat binary parameter container.
//!
//! Layout: magic `MFPK`, version u32 LE, then for each parameter:
//! name length (u32), name bytes, shape rank (u32), dims (u64 each),
//! then the values as little-endian f64. Parameters are written in
//! name order; optimizer state is not persisted.

use crate::store::ParamStore;
use crate::tensor::Tensor;
use crate::TensorError;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MFPK";
const VERSION: u32 = 1;

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| TensorError::BadCheckpoint("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(TensorError::BadCheckpoint(format!(
            "bad magic {:?}, expected MFPK",
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::BadCheckpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut store = ParamStore::new();
    loop {
        let name_len = match read_u32_opt(&mut r)? {
            Some(n) => n as usize,
            None => break,
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| TensorError::BadCheckpoint("truncated parameter name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| TensorError::BadCheckpoint("parameter name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|_| {
                TensorError::BadCheckpoint(format!("truncated data for parameter '{name}'"))
            })?;
            data.push(f64::from_le_bytes(buf));
        }
        store.register(&name, Tensor::new(shape, data));
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| TensorError::BadCheckpoint("truncated u32 field".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// `None` on clean EOF, error on partial read.
fn read_u32_opt(r: &mut impl Read) -> Result<Option<u32>, TensorError> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut b[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(TensorError::BadCheckpoint("truncated record header".into()));
        }
        got += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn read_u64(r: &mut impl Read) -> Result<u64, TensorError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| TensorError::BadCheckpoint("truncated u64 field".into()))?;
    Ok(u64::from_le_bytes(b))
}
