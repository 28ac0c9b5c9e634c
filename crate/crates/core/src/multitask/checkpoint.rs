//! Binary checkpoints.
//!
//! Layout (little-endian): magic, `u32` version, `u64`-prefixed model spec
//! JSON, `u64` parameter count, then per parameter a `u32`-prefixed name,
//! `u32` rank, `u64` dims and `f64` values; then `u64` batch-norm count with
//! per layer a name and its running mean/variance; finally the SHA-256 of
//! everything before it.

use super::config::ModelSpec;
use super::model::TwinModel;
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTLCKPT\0";
const VERSION: u32 = 1;

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_checkpoint(model: &TwinModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = serde_json::to_vec(model.spec())?;
    out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
    out.extend_from_slice(&spec);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        put_bytes(&mut out, p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let bns = model.batch_norms();
    out.extend_from_slice(&(bns.len() as u64).to_le_bytes());
    for (name, bn) in bns {
        put_bytes(&mut out, name.as_bytes());
        put_f64s(&mut out, &bn.running_mean);
        put_f64s(&mut out, &bn.running_var);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Rebuilds a model from checkpoint bytes; every parameter of the stored
/// spec must be present with its exact shape.
pub fn read_checkpoint(bytes: &[u8]) -> Result<TwinModel> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Cursor { buf: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum("checkpoint".into()));
    }
    let n = r.len()?;
    let spec: ModelSpec = serde_json::from_slice(r.take(n)?)?;
    let mut model = TwinModel::new(spec)?;

    let count = r.len()?;
    let mut stored = HashMap::with_capacity(count);
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(shape.iter().product())?;
        stored.insert(name, (shape, data));
    }
    let expected = model.params().len();
    for p in model.params_mut() {
        let (shape, data) = stored
            .remove(&p.name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{}`", p.name)))?;
        if shape != p.value.shape() {
            return Err(Error::Format(format!(
                "parameter `{}` has shape {shape:?}, model expects {:?}",
                p.name,
                p.value.shape()
            )));
        }
        p.value.data_mut().copy_from_slice(&data);
    }
    if count != expected || !stored.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, model has {expected}"
        )));
    }

    let n_bn = r.len()?;
    let mut bns: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for _ in 0..n_bn {
        let name = r.name()?;
        let m = r.len()?;
        let mean = r.f64s(m)?;
        let v = r.len()?;
        let var = r.f64s(v)?;
        bns.insert(name, (mean, var));
    }
    for (name, bn) in model.batch_norms_mut() {
        let (mean, var) = bns
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks running statistics for `{name}`")))?;
        if mean.len() != bn.features() || var.len() != bn.features() {
            return Err(Error::Format(format!("running statistics of `{name}` have the wrong length")));
        }
        bn.running_mean = mean;
        bn.running_var = var;
    }
    if !bns.is_empty() || r.pos != body.len() {
        return Err(Error::Format("checkpoint has trailing data".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TwinModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TwinModel> {
    read_checkpoint(&std::fs::read(path)?)
}
