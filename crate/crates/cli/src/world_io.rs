//! World file: `CTXWORLD`, a little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use ctxssl_core::{World, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{CliError, Result};

pub const WORLD_MAGIC: &[u8; 8] = b"CTXWORLD";
const WORLD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldHeader {
    pub format: String,
    pub version: u32,
    pub config: WorldConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

pub(crate) fn push_f32(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn encode_world(world: &World) -> Vec<u8> {
    let (w1, b1, w2) = world.render_weights();
    let tensors: [(&str, &[f32]); 4] = [
        ("prototypes", world.prototypes()),
        ("render.w1", w1),
        ("render.b1", b1),
        ("render.w2", w2),
    ];
    let mut payload = Vec::new();
    for (_, t) in &tensors {
        push_f32(&mut payload, t);
    }
    let header = WorldHeader {
        format: "ctxssl-world".into(),
        version: WORLD_VERSION,
        config: world.config().clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                len: t.len(),
            })
            .collect(),
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(WORLD_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_world(bytes: &[u8]) -> Result<World> {
    let bad = |m: &str| CliError::Mismatch(format!("world file: {m}"));
    if bytes.len() < 16 || &bytes[..8] != WORLD_MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: WorldHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
    if header.version != WORLD_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let payload = &body[hlen..];
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(bad("payload checksum"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for t in &header.tensors {
        let end = off + 4 * t.len;
        if end > payload.len() {
            return Err(bad(&format!("tensor `{}` runs past the payload", t.name)));
        }
        tensors.push(read_f32(&payload[off..end]));
        off = end;
    }
    if off != payload.len() || tensors.len() != 4 {
        return Err(bad("unexpected tensor layout"));
    }
    let w2 = tensors.pop().unwrap();
    let b1 = tensors.pop().unwrap();
    let w1 = tensors.pop().unwrap();
    let prototypes = tensors.pop().unwrap();
    Ok(World::from_parts(header.config, prototypes, w1, b1, w2)?)
}

pub fn save_world(world: &World, path: &Path) -> Result<String> {
    let bytes = encode_world(world);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Loads a world file and returns it with the file's sha256.
pub fn load_world(path: &Path) -> Result<(World, String)> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read world {}: {e}", path.display())))?;
    Ok((decode_world(&bytes)?, sha256_hex(&bytes)))
}
