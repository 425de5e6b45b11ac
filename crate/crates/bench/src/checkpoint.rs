//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "RMHACKPT"
//! version      u32      1
//! config hash  32 bytes SHA-256 of the config text
//! config len   u32
//! config text  utf-8 `key=value` lines describing the architecture
//! tensors      u32
//! per tensor:  u16 name length, name, u8 rank, u32 per dimension,
//!              f32 per value
//! ```
//!
//! Parameters are trained in f64 and stored as f32.

use std::path::Path;

use rmha_core::policy_net::{Model, ModelConfig, PolicyConfig};
use rmha_core::rmha_comm::{CommConfig, CommMode};
use sha2::{Digest, Sha256};

use crate::error::{write_file, BenchError, Result};

pub const MAGIC: &[u8; 8] = b"RMHACKPT";
pub const VERSION: u32 = 1;

/// Canonical text form of a model configuration.
pub fn config_text(c: &ModelConfig) -> String {
    let p = c.policy;
    let m = c.comm;
    format!(
        "mode={}\ncomm_radius={}\nfov={}\nspatial={}\nscalar={}\nhidden={}\ntorso={}\ncomm_dim={}\nheads={}\nlayers={}\nbuckets={}\nffn_mult={}\n",
        c.mode.name(),
        c.comm_radius,
        p.fov,
        p.spatial,
        p.scalar,
        p.hidden,
        p.torso,
        m.dim,
        m.heads,
        m.layers,
        m.buckets,
        m.ffn_mult
    )
}

pub fn parse_config_text(text: &str) -> std::result::Result<ModelConfig, String> {
    let get = |key: &str| -> std::result::Result<&str, String> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| format!("missing key {key}"))
    };
    let mode: CommMode = get("mode")?.parse().map_err(|e| format!("{e}"))?;
    let num = |key: &str| -> std::result::Result<usize, String> {
        get(key)?.parse().map_err(|_| format!("key {key} is not an integer"))
    };
    Ok(ModelConfig {
        policy: PolicyConfig {
            fov: num("fov")?,
            spatial: num("spatial")?,
            scalar: num("scalar")?,
            hidden: num("hidden")?,
            torso: num("torso")?,
        },
        comm: CommConfig {
            dim: num("comm_dim")?,
            heads: num("heads")?,
            layers: num("layers")?,
            buckets: num("buckets")?,
            ffn_mult: num("ffn_mult")?,
        },
        mode,
        comm_radius: num("comm_radius")? as u32,
    })
}

pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(model: &Model) -> Vec<u8> {
    let text = config_text(&model.config);
    let mut out = Vec::with_capacity(64 + text.len() + 4 * model.graph.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash(&text));
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let specs = model.graph.specs();
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for spec in specs {
        out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.push(spec.shape.len() as u8);
        for &d in &spec.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in spec.slot.of(model.graph.data()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.err("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn err(&self, message: impl Into<String>) -> BenchError {
        BenchError::Checkpoint {
            path: self.origin.to_string(),
            message: message.into(),
        }
    }
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(8)? != MAGIC {
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.err("config text is not utf-8"))?;
    if config_hash(text) != hash {
        return Err(r.err("config hash mismatch"));
    }
    let config = parse_config_text(text).map_err(|m| r.err(m))?;
    let mut model = Model::zeroed(config)?;
    let count = r.u32()? as usize;
    if count != model.graph.specs().len() {
        return Err(r.err(format!("expected {} tensors, found {count}", model.graph.specs().len())));
    }
    for k in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.err("tensor name is not utf-8"))?.to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let spec = model.graph.specs()[k].clone();
        if spec.name != name || spec.shape != shape {
            return Err(r.err(format!(
                "tensor {k} is {name} {shape:?}, the architecture expects {} {:?}",
                spec.name, spec.shape
            )));
        }
        let raw = r.take(4 * spec.slot.len)?;
        let dst = spec.slot.of_mut(model.graph.data_mut());
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().expect("four bytes")) as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after the last tensor"));
    }
    if !model.graph.is_finite() {
        return Err(r.err("non-finite parameter values"));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    write_file(path, encode(model))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| BenchError::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
