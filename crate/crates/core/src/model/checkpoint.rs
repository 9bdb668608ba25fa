//! Binary checkpoint format.
//!
//! ```text
//! magic "TTTUCDR1" (8 bytes)
//! version      u32 LE
//! tensor count u32 LE
//! per tensor:  name len u16 LE, UTF-8 name, rank u8, dims u32 LE each,
//!              payload f64 LE row-major
//! ```
//!
//! There is no padding. Gradients are not stored.

use std::fs;
use std::path::Path;

use super::{Linear, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TTTUCDR1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let tensors = params.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
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
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::CheckpointTruncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8).map_err(|_| Error::checkpoint("magic", "file shorter than the magic bytes"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint(
            "magic",
            format!("expected {:?}, found {:?}", String::from_utf8_lossy(CHECKPOINT_MAGIC), String::from_utf8_lossy(magic)),
        ));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(
            "version",
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(64));
    for i in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::checkpoint(format!("tensor[{i}].name"), "not valid UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        if rank == 0 {
            return Err(Error::checkpoint(format!("{name}.rank"), "rank must be positive"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::checkpoint(format!("{name}.dims"), e.to_string()))?;
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::checkpoint(name, "duplicate tensor name"));
        }
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::checkpoint(
            "payload",
            format!("{} trailing bytes after the last tensor", bytes.len() - r.pos),
        ));
    }
    assemble(tensors)
}

struct Pool(Vec<(String, Tensor)>);

impl Pool {
    fn has(&self, name: &str) -> bool {
        self.0.iter().any(|(n, _)| n == name)
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        let idx = self
            .0
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::checkpoint(name, "missing tensor"))?;
        Ok(self.0.remove(idx).1)
    }

    fn layer(&mut self, prefix: &str, fan_in: Option<usize>) -> Result<Linear> {
        let weight = self.take(&format!("{prefix}.weight"))?;
        let bias = self.take(&format!("{prefix}.bias"))?;
        if weight.shape().len() != 2 {
            return Err(Error::checkpoint(
                format!("{prefix}.weight"),
                format!("expected rank 2, got {:?}", weight.shape()),
            ));
        }
        if let Some(expected) = fan_in {
            if weight.shape()[0] != expected {
                return Err(Error::checkpoint(
                    format!("{prefix}.weight"),
                    format!(
                        "input width {} does not match previous layer output {expected}",
                        weight.shape()[0]
                    ),
                ));
            }
        }
        if bias.shape() != [weight.shape()[1]] {
            return Err(Error::checkpoint(
                format!("{prefix}.bias"),
                format!("shape {:?} does not match weight {:?}", bias.shape(), weight.shape()),
            ));
        }
        Ok(Linear { weight, bias })
    }
}

fn assemble(tensors: Vec<(String, Tensor)>) -> Result<ModelParams> {
    let mut pool = Pool(tensors);
    let mut backbone = Vec::new();
    let mut width = None;
    while backbone.is_empty() || pool.has(&format!("bb.{}.weight", backbone.len())) {
        let l = pool.layer(&format!("bb.{}", backbone.len()), width)?;
        width = Some(l.fan_out());
        backbone.push(l);
    }
    let latent = pool.layer("sn", width)?;
    let head = pool.layer("a", Some(latent.fan_out()))?;
    let classifier = if pool.has("cls.weight") {
        Some(pool.layer("cls", Some(latent.fan_out()))?)
    } else {
        None
    };
    if let Some((name, _)) = pool.0.first() {
        return Err(Error::checkpoint(name.clone(), "unexpected tensor"));
    }
    Ok(ModelParams {
        backbone,
        latent,
        head,
        classifier,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::checkpoint("path", format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
