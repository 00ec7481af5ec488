//! Versioned named-tensor checkpoint files.
//!
//! Layout: magic "SLOTM1", format version (u32 LE), a length-prefixed UTF-8
//! config block of `key=value` lines, then tensors until EOF: name length
//! (u32), name, dtype code (u8, 0 = f32), rank (u32), dims (u32 each), then
//! the little-endian payload. Round trips are bitwise.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::diff::Tensor;

const MAGIC: &[u8; 6] = b"SLOTM1";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("unsupported dtype code {0}")]
    BadDtype(u8),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// In-memory checkpoint: a config map and ordered named tensors.
#[derive(Debug, Clone, Default)]
pub struct CheckpointData {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl CheckpointData {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.get(key).map(|s| s.as_str())
    }
}

pub fn save<W: Write>(mut w: W, data: &CheckpointData) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let mut block = String::new();
    for (k, v) in &data.config {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(CheckpointError::Malformed(format!(
                "config key/value may not contain '=' in key or newlines: {k:?}"
            )));
        }
        block.push_str(k);
        block.push('=');
        block.push_str(v);
        block.push('\n');
    }
    let bytes = block.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;

    for (name, t) in &data.tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
        for &d in t.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_to_file<P: AsRef<Path>>(path: P, data: &CheckpointData) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    save(&mut w, data)?;
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| CheckpointError::Truncated(what))
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load<R: Read>(mut r: R) -> Result<CheckpointData, CheckpointError> {
    let mut magic = [0u8; 6];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config_len = read_u32(&mut r, "config length")? as usize;
    let mut block = vec![0u8; config_len];
    read_exact_or(&mut r, &mut block, "config block")?;
    let block = String::from_utf8(block)
        .map_err(|e| CheckpointError::Malformed(format!("config block not UTF-8: {e}")))?;
    let mut config = BTreeMap::new();
    for line in block.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("config line without '=': {line:?}")))?;
        config.insert(k.to_string(), v.to_string());
    }

    let mut tensors = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::Malformed(format!("tensor name not UTF-8: {e}")))?;
        let mut dtype = [0u8; 1];
        read_exact_or(&mut r, &mut dtype, "dtype")?;
        if dtype[0] != DTYPE_F32 {
            return Err(CheckpointError::BadDtype(dtype[0]));
        }
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r, "dims")? as usize);
        }
        let count: usize = dims.iter().product();
        let mut payload = vec![0u8; count * 4];
        read_exact_or(&mut r, &mut payload, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    Ok(CheckpointData { config, tensors })
}

pub fn load_from_file<P: AsRef<Path>>(path: P) -> Result<CheckpointData, CheckpointError> {
    load(BufReader::new(File::open(path)?))
}
