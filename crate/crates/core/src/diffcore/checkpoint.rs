//! Parameter checkpoint format: one human-readable header line, a JSON
//! manifest (names, shapes, offsets, plus caller metadata), then raw
//! little-endian f64 data. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "CHARMLAB-CKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// What the tensor is: "param", "buffer", "opt_m", "opt_v", ...
    pub kind: String,
    pub shape: Vec<usize>,
    /// Offset into the data block, counted in f64 elements.
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: String,
    pub tensor: Tensor,
}

pub fn save(path: &Path, meta: &serde_json::Value, entries: &[CheckpointEntry]) -> Result<()> {
    let mut manifest = Manifest {
        meta: meta.clone(),
        entries: Vec::with_capacity(entries.len()),
    };
    let mut offset = 0u64;
    for e in entries {
        manifest.entries.push(ManifestEntry {
            name: e.name.clone(),
            kind: e.kind.clone(),
            shape: e.tensor.shape().to_vec(),
            offset,
        });
        offset += e.tensor.numel() as u64;
    }
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC} {}", manifest_bytes.len())?;
    w.write_all(&manifest_bytes)?;
    for e in entries {
        for v in e.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<CheckpointEntry>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 256 {
            return Err(Error::Checkpoint("header line too long".into()));
        }
    }
    let header = String::from_utf8(header)
        .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::Checkpoint(format!("bad magic in '{header}'")));
    }
    let manifest_len: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing manifest length".into()))?;

    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 8 != 0 {
        return Err(Error::Checkpoint("data block not a multiple of 8 bytes".into()));
    }
    let floats: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut entries = Vec::with_capacity(manifest.entries.len());
    for m in &manifest.entries {
        let numel: usize = m.shape.iter().product();
        let start = m.offset as usize;
        let end = start + numel;
        if end > floats.len() {
            return Err(Error::Checkpoint(format!(
                "entry '{}' overruns data block",
                m.name
            )));
        }
        entries.push(CheckpointEntry {
            name: m.name.clone(),
            kind: m.kind.clone(),
            tensor: Tensor::from_vec(m.shape.clone(), floats[start..end].to_vec())?,
        });
    }
    Ok((manifest.meta, entries))
}
