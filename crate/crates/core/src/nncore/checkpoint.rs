//! Checkpoint file: a named-parameter table (f32 data, little-endian) with a
//! JSON manifest describing the model configuration.
//!
//! Layout: magic "PVCKPT01", u32 manifest length, manifest bytes, u64 param
//! count, then per parameter { u32 name_len, name, u32 ndim, u64 x ndim dims,
//! f32 data }. Values are stored f32; in-memory parameters are f64, so a
//! save/load round trip quantizes to f32 precision.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};

use super::graph::Tensor;
use super::params::ParamSet;

const MAGIC: &[u8; 8] = b"PVCKPT01";

pub fn save_checkpoint(path: &Path, params: &ParamSet, manifest: &str) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    let mb = manifest.as_bytes();
    out.extend_from_slice(&(mb.len() as u32).to_le_bytes());
    out.extend_from_slice(mb);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        let t = params.tensor(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let fail = |detail: String, offset: usize| Error::Format {
        path: path.to_path_buf(),
        detail,
        offset: offset as u64,
    };
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(fail(format!("truncated: need {n} bytes"), *off));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 8)? != MAGIC {
        return Err(fail("bad magic".into(), 0));
    }
    let mlen = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let manifest = String::from_utf8(take(&mut off, mlen)?.to_vec())
        .map_err(|e| fail(format!("manifest not utf-8: {e}"), 12))?;
    let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, nlen)?.to_vec())
            .map_err(|e| fail(format!("name not utf-8: {e}"), off))?;
        let ndim = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut off, n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.add(name, Tensor::new(shape, data));
    }
    if off != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - off), off));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let mut params = ParamSet::new();
        params.add("a.w", Tensor::new(vec![2, 3], vec![1.0, -0.5, 0.25, 2.0, 0.0, -1.0]));
        params.add("a.b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.pvt");
        save_checkpoint(&path, &params, "{\"channels\":8}").unwrap();
        let (back, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest, "{\"channels\":8}");
        assert_eq!(back.len(), 2);
        let a = back.lookup("a.w").unwrap();
        assert_eq!(back.tensor(a).shape, vec![2, 3]);
        for (x, y) in back.tensor(a).data.iter().zip(&params.tensor(params.lookup("a.w").unwrap()).data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pvt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
