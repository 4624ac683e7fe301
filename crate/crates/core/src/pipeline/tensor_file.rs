//! `RDT1` tensor container: magic, u32 rank, u32 dims, little-endian f32
//! payload in row-major order. Attention traces are stored as one stacked
//! tensor per file.

use std::path::Path;

use crate::denoiser::{CrossAttentionMap, MapTag};
use crate::error::{Error, Result};
use crate::guidance::{AttentionTrace, AttentionTriple, ReferenceTrace};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"RDT1";

pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn word(bytes: &[u8], at: usize) -> Result<[u8; 4]> {
    bytes
        .get(at..at + 4)
        .map(|b| [b[0], b[1], b[2], b[3]])
        .ok_or_else(|| Error::Format("tensor file is truncated".into()))
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.get(..4) != Some(TENSOR_MAGIC.as_slice()) {
        return Err(Error::Format("not a tensor file (bad magic)".into()));
    }
    let rank = u32::from_le_bytes(word(bytes, 4)?) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(u32::from_le_bytes(word(bytes, 8 + 4 * i)?) as usize);
    }
    let start = 8 + 4 * rank;
    let count: usize = dims.iter().product();
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| Error::Format(format!("tensor dims {dims:?} overflow")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "tensor file holds {} bytes but dims {dims:?} need {expected}",
            bytes.len()
        )));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, tensor_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes)
}

fn stack(maps: &[&Tensor], lead: &[usize]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::param("cannot store an empty trace"))?;
    let mut dims = lead.to_vec();
    dims.extend_from_slice(first.dims());
    let mut data = Vec::with_capacity(maps.len() * first.numel());
    for m in maps {
        first.expect_same_dims(m)?;
        data.extend_from_slice(m.data());
    }
    Tensor::new(dims, data)
}

fn unstack(t: &Tensor, lead: usize) -> Result<(Vec<Tensor>, Vec<usize>)> {
    if t.rank() != lead + 2 {
        return Err(Error::Format(format!(
            "trace tensor has dims {:?}; expected rank {}",
            t.dims(),
            lead + 2
        )));
    }
    let inner = t.dims()[lead..].to_vec();
    let size: usize = inner.iter().product();
    let maps = t
        .data()
        .chunks_exact(size.max(1))
        .map(|c| Tensor::new(inner.clone(), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((maps, t.dims()[..lead].to_vec()))
}

/// Stack an attention trace as `[n_steps, 3, N, L]` (input, label, target).
pub fn attention_trace_tensor(trace: &AttentionTrace) -> Result<Tensor> {
    let maps: Vec<&Tensor> = trace
        .steps
        .iter()
        .flat_map(|s| [&s.m_x.matrix, &s.m_yp.matrix, &s.m_y.matrix])
        .collect();
    stack(&maps, &[trace.len(), 3])
}

/// Inverse of [`attention_trace_tensor`]; `steps` gives the model step of
/// each entry.
pub fn attention_trace_from_tensor(t: &Tensor, steps: &[usize]) -> Result<AttentionTrace> {
    let (maps, lead) = unstack(t, 2)?;
    if lead != [steps.len(), 3] {
        return Err(Error::Format(format!(
            "attention trace has leading dims {lead:?}, expected [{}, 3]",
            steps.len()
        )));
    }
    let mut it = maps.into_iter();
    let mut trace = AttentionTrace::default();
    for &step in steps {
        let mut next = |tag| CrossAttentionMap {
            matrix: it.next().expect("length checked above"),
            step,
            tag,
        };
        trace.steps.push(AttentionTriple {
            m_x: next(MapTag::Input),
            m_yp: next(MapTag::Label),
            m_y: next(MapTag::Target),
        });
    }
    Ok(trace)
}

/// Stack a reference trace as `[n_steps, N, L]`.
pub fn reference_trace_tensor(reference: &ReferenceTrace) -> Result<Tensor> {
    let maps: Vec<&Tensor> = reference.maps.iter().map(|m| &m.matrix).collect();
    stack(&maps, &[reference.len()])
}

pub fn reference_trace_from_tensor(t: &Tensor, steps: &[usize]) -> Result<ReferenceTrace> {
    let (maps, lead) = unstack(t, 1)?;
    if lead != [steps.len()] {
        return Err(Error::Format(format!(
            "reference trace has {} steps, expected {}",
            lead[0],
            steps.len()
        )));
    }
    Ok(ReferenceTrace {
        maps: maps
            .into_iter()
            .zip(steps)
            .map(|(matrix, &step)| CrossAttentionMap {
                matrix,
                step,
                tag: MapTag::Ref,
            })
            .collect(),
    })
}
