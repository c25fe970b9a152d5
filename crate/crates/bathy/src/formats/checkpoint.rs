//! `.sbun` model checkpoints.
//!
//! Layout, all integers u32 little-endian: magic `SBUN`, version, config
//! text length and bytes (`net.*` lines), tensor count, then per tensor its
//! name length and bytes, rank, dims and `f32` little-endian values.

use std::path::Path;

use bathy_core::network::{param_specs, ModelParams};
use bathy_core::Tensor;

use crate::config::{network_config, network_config_text, KvFile, NET_KEYS};
use crate::error::{read_file, write_file, BathyError, Result};

pub const MAGIC: &[u8; 4] = b"SBUN";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

pub fn checkpoint_to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = network_config_text(&params.config);
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, params.tensors.len());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for d in t.shape() {
            put_u32(&mut out, *d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| BathyError::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| BathyError::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Parses and validates a checkpoint: every tensor must match the name and
/// shape the embedded configuration implies.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(BathyError::Checkpoint("bad magic, not an SBUN checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(BathyError::Checkpoint(format!("unsupported version {version}")));
    }
    let text = r.string("config")?;
    let kv = KvFile::parse(&text, "checkpoint config")?;
    kv.check_keys(NET_KEYS, &[])?;
    let config = network_config(&kv)?;
    let specs = param_specs(&config)?;
    let count = r.u32("tensor count")?;
    if count != specs.len() {
        return Err(BathyError::Checkpoint(format!("{count} tensors, configuration needs {}", specs.len())));
    }
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for spec in &specs {
        let name = r.string("tensor name")?;
        if name != spec.name {
            return Err(BathyError::Checkpoint(format!("found tensor `{name}` where `{}` was expected", spec.name)));
        }
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        if dims != spec.shape {
            return Err(BathyError::Checkpoint(format!("tensor `{name}` has shape {dims:?}, configuration needs {:?}", spec.shape)));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push(Tensor::new(dims, data)?);
        names.push(name);
    }
    if r.pos != bytes.len() {
        return Err(BathyError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModelParams { config, names, tensors })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    params.validate()?;
    write_file(path, &checkpoint_to_bytes(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    checkpoint_from_bytes(&read_file(path)?)
}
