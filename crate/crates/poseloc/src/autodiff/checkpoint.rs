//! Binary container for trained parameters.
//!
//! Layout: 8-byte magic, u32 format version, u32 header length + UTF-8 JSON
//! header (model hyperparameters, scene normalization, anything the loader
//! needs to rebuild shapes), u32 parameter count, then each parameter as
//! `name_len:u32, name, rank:u32, dims:u32*rank, f32 little-endian data`.
//! Values are stored as f32 and round-trip bit-exactly. Files are written to
//! a temporary sibling and renamed into place so readers never observe a
//! partial checkpoint.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 8] = b"PLOCCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid header json: {0}")]
    Header(#[from] serde_json::Error),
}

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawParam {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawParam {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        let name = name.into();
        let expect: usize = dims.iter().product();
        assert_eq!(data.len(), expect, "param {name}: {} values for dims {dims:?}", data.len());
        RawParam { name, dims, data }
    }
}

/// Serializes `header` (any JSON value) and `params` to `path` atomically.
pub fn save_checkpoint(
    path: &Path,
    header: &serde_json::Value,
    params: &[RawParam],
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header_bytes = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
        for &d in &p.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<RawParam>), CheckpointError> {
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let mut pos = 0usize;

    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated at byte {} (wanted {n} more of {})",
                *pos,
                buf.len()
            )));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32, CheckpointError> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = take_u32(&mut pos)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let header_len = take_u32(&mut pos)? as usize;
    let header: serde_json::Value = serde_json::from_slice(take(&mut pos, header_len)?)?;
    let count = take_u32(&mut pos)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| CheckpointError::Corrupt(format!("param name not utf-8: {e}")))?;
        let rank = take_u32(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(take_u32(&mut pos)? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let mut data = Vec::with_capacity(n);
        for c in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        params.push(RawParam { name, dims, data });
    }
    if pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after last parameter",
            buf.len() - pos
        )));
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let header = json!({"kind": "test", "hidden": 128, "scale": 0.8125});
        let params = vec![
            RawParam::new("w0", vec![2, 3], vec![1.5, -2.25, 0.0, f32::MIN_POSITIVE, 1e-30, 3.0]),
            RawParam::new("b0", vec![3], vec![0.1, 0.2, 0.3]),
            RawParam::new("empty", vec![0], vec![]),
        ];
        save_checkpoint(&path, &header, &params).unwrap();
        let (h2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(p2.len(), params.len());
        for (a, b) in params.iter().zip(&p2) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "param {} not bit-exact", a.name);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = vec![RawParam::new("w", vec![4], vec![1.0, 2.0, 3.0, 4.0])];
        save_checkpoint(&path, &json!({}), &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/nowhere.ckpt")),
            Err(CheckpointError::Io(_))
        ));
    }
}
