//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "RWCK" | u32 version | u32 meta_len | meta (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u16 name_len | name | u32 ndim | u32 dims[ndim] | u64 offset (in f32 elements)
//! data: f32 values, tensors concatenated in directory order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RWCK";

pub fn write_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(meta)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += t.len() as u64;
    }
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor<f32>)>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)
        .map_err(|_| Error::Checkpoint("truncated metadata".into()))?;
    let meta: serde_json::Value = serde_json::from_slice(&meta)?;
    let count = read_u32(&mut r)? as usize;
    let mut dir = Vec::with_capacity(count);
    for _ in 0..count {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl)
            .map_err(|_| Error::Checkpoint("truncated directory".into()))?;
        let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated directory".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut off = [0u8; 8];
        r.read_exact(&mut off)
            .map_err(|_| Error::Checkpoint("truncated directory".into()))?;
        dir.push((name, shape, u64::from_le_bytes(off)));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 4 != 0 {
        return Err(Error::Checkpoint("data section is not a whole number of f32 values".into()));
    }
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in dir {
        let n: usize = shape.iter().product();
        let start = offset as usize;
        let slice = values
            .get(start..start + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` runs past the data section")))?;
        out.push((name, Tensor::from_vec(&shape, slice.to_vec())?));
    }
    Ok((meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = Tensor::from_vec(&[2, 3], vec![1.0f32, -2.0, 3.5, 0.0, 1e-8, 7.0]).unwrap();
        let b = Tensor::from_vec(&[4], vec![0.25f32; 4]).unwrap();
        let meta = serde_json::json!({"kind": "test"});
        write_checkpoint(&path, &meta, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (m, ts) = read_checkpoint(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(ts[0], ("a".to_string(), a));
        assert_eq!(ts[1], ("b".to_string(), b));
    }

    #[test]
    fn truncated_and_versioned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = Tensor::from_vec(&[8], vec![1.0f32; 8]).unwrap();
        write_checkpoint(&path, &serde_json::json!({}), &[("a".into(), &a)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::FormatVersion { found: 9, .. })));
    }
}
