//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"MVLT"
//! u32    version = 1
//! u32    config length, then that many bytes of model-config JSON
//! u32    tensor count, then per tensor:
//!          u32 name length + name bytes (UTF-8)
//!          u32 rank, rank × u64 dims
//!          product(dims) × f64 values
//! u8     optimizer flag; if 1:
//!          u64 step counter t
//!          per tensor, in table order: first moments then second moments,
//!          each product(dims) × f64
//! u64    rng seed
//! u64    step
//! ```
//!
//! Parameters are written in store order (creation order), which is fixed
//! by the config, so identical runs produce byte-identical files.

use crate::config::ModelConfig;
use crate::error::Error;
use crate::model::MvltModel;
use crate::optim::AdamWState;
use crate::Result;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MVLT";
const VERSION: u32 = 1;

/// A deserialized checkpoint, not yet bound to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<AdamWState>,
    pub rng_seed: u64,
    pub step: u64,
}

pub fn save_checkpoint(
    model: &MvltModel,
    optimizer: Option<&AdamWState>,
    rng_seed: u64,
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let config_json = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);

    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, param) in model.store.iter() {
        let name = param.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(param.tensor.shape.len() as u32).to_le_bytes());
        for &dim in &param.tensor.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in &param.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    match optimizer {
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.t.to_le_bytes());
            for pid in 0..model.store.len() {
                for &v in &state.m[pid] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for &v in &state.v[pid] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        None => out.push(0),
    }

    out.extend_from_slice(&rng_seed.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("truncated file at offset {}", self.pos)))?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes, not a checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let config_len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)
        .map_err(|e| Error::Format(format!("bad embedded config: {e}")))?;

    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = cur.f64s(numel)?;
        params.push((name, shape, data));
    }

    let optimizer = if cur.u8()? == 1 {
        let t = cur.u64()?;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for (_, shape, _) in &params {
            let numel: usize = shape.iter().product();
            m.push(cur.f64s(numel)?);
            v.push(cur.f64s(numel)?);
        }
        Some(AdamWState { m, v, t })
    } else {
        None
    };

    let rng_seed = cur.u64()?;
    let step = cur.u64()?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cur.pos
        )));
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        rng_seed,
        step,
    })
}

impl Checkpoint {
    /// Rebuild the model and overwrite its weights with the stored values.
    /// Every parameter must match the config-derived store by name and
    /// shape, in order.
    pub fn into_model(self) -> Result<(MvltModel, Option<AdamWState>)> {
        let mut model = MvltModel::new(self.config.clone(), 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config implies {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (pid, (name, shape, data)) in self.params.into_iter().enumerate() {
            let param = model.store.get_mut(pid);
            if param.name != name {
                return Err(Error::Format(format!(
                    "tensor {pid} is {name:?}, expected {:?}",
                    param.name
                )));
            }
            if param.tensor.shape != shape {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {shape:?}, config implies {:?}",
                    param.tensor.shape
                )));
            }
            param.tensor.data = data;
        }
        Ok((model, self.optimizer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn micro_model(seed: u64) -> MvltModel {
        MvltModel::new(ModelConfig::micro(), seed).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let model = micro_model(7);
        let opt = AdamWState::new(&model.store);
        save_checkpoint(&model, Some(&opt), 7, 42, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.rng_seed, 7);
        let (model2, opt2) = loaded.into_model().unwrap();
        save_checkpoint(&model2, opt2.as_ref(), 7, 42, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn tensors_survive_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let model = micro_model(3);
        save_checkpoint(&model, None, 3, 0, &path).unwrap();
        let (back, opt) = load_checkpoint(&path).unwrap().into_model().unwrap();
        assert!(opt.is_none());
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data, b.tensor.data);
        }
    }

    #[test]
    fn corrupted_magic_is_rejected_without_partial_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let model = micro_model(3);
        save_checkpoint(&model, None, 3, 0, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let model = micro_model(3);
        save_checkpoint(&model, None, 3, 0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let model = micro_model(3);
        save_checkpoint(&model, None, 3, 0, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
