//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `PDVAECK1`, u32 version, u64 header length, header JSON (model config
//! and latent mode), u64 step,
//! u32 tensor count, then per tensor u32 name length, name, u32 rank,
//! u64 dims, f64 data; then u8 optimizer flag and, if set, u64 optimizer
//! step followed by the first- and second-moment tensors in parameter order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::{OptimizerState, Tensor};
use crate::error::{Error, Result};
use crate::networks::{LatentMode, ModelConfig, PdvaeModel};

const MAGIC: &[u8; 8] = b"PDVAECK1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    latent_mode: LatentMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// How latents were drawn in training; generation must match.
    pub latent_mode: LatentMode,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(model: &PdvaeModel, latent_mode: LatentMode, optimizer: Option<&OptimizerState>) -> Self {
        let store = model.params();
        Checkpoint {
            config: model.config().clone(),
            latent_mode,
            step: optimizer.map_or(0, |o| o.step),
            params: store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.config.clone(),
            latent_mode: self.latent_mode,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for t in o.m.iter().chain(&o.v) {
                    write_tensor(&mut out, t);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let len = r.len("header length")?;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let step = r.u64("step")?;
        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let t = r.tensor(&name)?;
            params.push((name, t));
        }
        let optimizer = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let ostep = r.u64("optimizer step")?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for (name, _) in &params {
                    m.push(r.tensor(name)?);
                }
                for (name, _) in &params {
                    v.push(r.tensor(name)?);
                }
                Some(OptimizerState { step: ostep, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config: header.model,
            latent_mode: header.latent_mode,
            step,
            params,
            optimizer,
        })
    }

    /// Builds a model from the stored config and parameters.
    pub fn into_model(self) -> Result<(PdvaeModel, Option<OptimizerState>)> {
        let mut model = PdvaeModel::new(self.config.clone(), 0)?;
        let opt = self.restore_into(&mut model)?;
        Ok((model, opt))
    }

    /// Loads the parameters into an existing model. Tensor shapes are
    /// checked first so a size mismatch names the offending tensor; any
    /// other config difference is reported afterwards.
    pub fn restore_into(self, model: &mut PdvaeModel) -> Result<Option<OptimizerState>> {
        let expected = model.config().clone();
        let before = model.params().clone();
        if let Err(e) = model.load_params(self.params) {
            *model.params_mut() = before;
            return Err(e);
        }
        if expected != self.config {
            *model.params_mut() = before;
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint {:?}, model {:?}",
                self.config, expected
            )));
        }
        if let Some(o) = &self.optimizer {
            let shapes = model.params().shapes();
            let ok = o.m.len() == shapes.len()
                && o.m.iter().zip(&o.v).zip(&shapes).all(|((m, v), s)| m.shape() == s && v.shape() == s);
            if !ok {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
        }
        Ok(self.optimizer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: reading {what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} overflows")))
    }

    fn tensor(&mut self, name: &str) -> Result<Tensor> {
        let rank = self.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.len("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` size overflows")))?;
        let raw = self.take(numel, name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(&shape, data)
    }
}
