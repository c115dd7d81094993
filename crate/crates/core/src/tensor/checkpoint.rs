//! Parameter checkpoint archive.
//!
//! Layout: the 8-byte magic `HNFCKPT\0`, a little-endian u64 manifest length,
//! the JSON manifest, then every entry's values as little-endian f32 in
//! manifest order. The manifest carries the format version, the network
//! config and its SHA-256, and per entry the name, kind, shape and offset.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamKind, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HNFCKPT\0";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_hash: String,
    config: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    buffer: bool,
    shape: Vec<usize>,
    offset: usize,
}

/// Loaded archive: the stored config plus all tensors as f32.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub params: ParamStore<f32>,
}

/// SHA-256 (hex) of the compact JSON serialization of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json values always serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, config: &serde_json::Value) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, p) in store.iter() {
        entries.push(Entry {
            name: p.name.clone(),
            buffer: p.kind == ParamKind::Buffer,
            shape: p.tensor.shape().to_vec(),
            offset,
        });
        offset += p.tensor.numel();
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config_hash: config_hash(config),
        config: config.clone(),
        entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
    buf.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for &v in p.tensor.data() {
            let v = v.to_f32().expect("scalar converts to f32");
            buf.write_f32::<LittleEndian>(v).expect("vec write");
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {}", path.display(), msg));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let mlen = (&bytes[8..16]).read_u64::<LittleEndian>().map_err(|_| bad("short header"))? as usize;
    let body = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", manifest.format_version)));
    }
    if config_hash(&manifest.config) != manifest.config_hash {
        return Err(bad("config hash does not match the embedded config"));
    }
    let payload = &bytes[16 + mlen..];
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset * 4..(e.offset + n) * 4)
            .ok_or_else(|| bad(&format!("payload of `{}` is truncated", e.name)))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let kind = if e.buffer { ParamKind::Buffer } else { ParamKind::Trainable };
        store.register(e.name.clone(), Tensor::new(e.shape.clone(), data)?, kind)?;
    }
    Ok(Checkpoint { config: manifest.config, config_hash: manifest.config_hash, params: store })
}

impl Checkpoint {
    /// Copies every stored tensor into `store`. Both sides must hold exactly
    /// the same names and shapes.
    pub fn apply_to<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, network expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (_, p) in self.params.iter() {
            let id = store
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("network has no parameter `{}`", p.name)))?;
            store.set(id, p.tensor.cast())?;
        }
        Ok(())
    }
}
