//! Model checkpoint container: `RDMW`, a version byte, a u32 tensor count,
//! then named tensors (u32 name length, name bytes, u32 rank, u32 dims,
//! little-endian f32 data). The model configuration is stored as `meta.*`
//! tensors ahead of the parameters.

use std::path::Path;

use crate::denoiser::model::{ModelConfig, Param, ToyDenoiser};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDMW";
pub const CHECKPOINT_VERSION: u8 = 1;

fn meta_tensors(cfg: &ModelConfig) -> Vec<(String, Tensor)> {
    let scalar = |v: usize| Tensor::scalar(v as f32);
    let list = |v: &[usize]| {
        if v.is_empty() {
            Tensor::scalar(0.0)
        } else {
            Tensor::from_fn(&[v.len()], |i| v[i] as f32)
        }
    };
    vec![
        ("meta.size".into(), scalar(cfg.size)),
        ("meta.channels".into(), scalar(cfg.channels)),
        ("meta.width".into(), scalar(cfg.width)),
        ("meta.attn_dim".into(), scalar(cfg.attn_dim)),
        ("meta.time_dim".into(), scalar(cfg.time_dim)),
        ("meta.pre_dilations".into(), list(&cfg.pre_dilations)),
        ("meta.post_dilations".into(), list(&cfg.post_dilations)),
    ]
}

pub fn checkpoint_bytes(model: &ToyDenoiser) -> Vec<u8> {
    let mut named = meta_tensors(model.config());
    named.extend(model.params().iter().map(|p| (p.name.clone(), p.value.clone())));
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn meta_usize(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ToyDenoiser> {
    if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic bytes)".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            bytes[4]
        )));
    }
    let mut r = Reader { bytes, pos: 5 };
    let count = r.u32()?;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))?;
        named.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let mut meta = |key: &str| -> Result<Vec<usize>> {
        let i = named
            .iter()
            .position(|(n, _)| n == key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
        Ok(meta_usize(&named.remove(i).1))
    };
    let dilations = |v: Vec<usize>| v.into_iter().filter(|&d| d != 0).collect();
    let config = ModelConfig {
        size: meta("meta.size")?[0],
        channels: meta("meta.channels")?[0],
        width: meta("meta.width")?[0],
        attn_dim: meta("meta.attn_dim")?[0],
        time_dim: meta("meta.time_dim")?[0],
        pre_dilations: dilations(meta("meta.pre_dilations")?),
        post_dilations: dilations(meta("meta.post_dilations")?),
    };
    let params = named
        .into_iter()
        .map(|(name, value)| Param { name, value })
        .collect();
    ToyDenoiser::from_params(config, params).map_err(|e| match e {
        Error::Parameter(m) => Error::Format(m),
        other => other,
    })
}

pub fn save_checkpoint(model: &ToyDenoiser, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyDenoiser> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
