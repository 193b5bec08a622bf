//! Versioned checkpoint container.
//!
//! `<path>` holds the tensors: magic `EGCK`, version `u32`, tensor count
//! `u32`, then per tensor `name_len u32, name, rows u32, cols u32, rows·cols f64`
//! (little-endian). Optimizer moments are stored as extra tensors under
//! `optim.m/<name>` and `optim.v/<name>`. `<path>.json` is the sidecar with the
//! model kind, its config and the training state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{put_f64, put_u32, read_bytes, read_json, to_u32, write_bytes, write_json, LeReader};
use crate::nn::{AdamW, ParamStore};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: usize,
    pub epoch_losses: Vec<f64>,
    #[serde(skip)]
    pub optimizer: Option<AdamW>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub state: TrainingState,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip_norm: Option<f64>,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: String,
    version: u32,
    config: serde_json::Value,
    state: TrainingState,
    optimizer: Option<OptimizerMeta>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn put_tensor(out: &mut Vec<u8>, name: &str, m: &Matrix) -> Result<()> {
    put_u32(out, to_u32(name.len(), "tensor name length")?);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, to_u32(m.rows(), "rows")?);
    put_u32(out, to_u32(m.cols(), "cols")?);
    for &x in m.as_slice() {
        put_f64(out, x);
    }
    Ok(())
}

impl Checkpoint {
    pub fn encode_tensors(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let extra = self.state.optimizer.as_ref().map_or(0, |o| o.m.len() + o.v.len());
        put_u32(&mut out, to_u32(self.params.len() + extra, "tensor count")?);
        for (name, value) in self.params.iter() {
            put_tensor(&mut out, name, value)?;
        }
        if let Some(opt) = &self.state.optimizer {
            for (id, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                let name = self.params.name(id);
                put_tensor(&mut out, &format!("optim.m/{name}"), m)?;
                put_tensor(&mut out, &format!("optim.v/{name}"), v)?;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode_tensors()?)?;
        let optimizer = self.state.optimizer.as_ref().map(|o| OptimizerMeta {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            clip_norm: o.clip_norm,
            step: o.step,
        });
        let sidecar = Sidecar {
            kind: self.kind.clone(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            state: self.state.clone(),
            optimizer,
        };
        write_json(&sidecar_path(path), &sidecar)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let sidecar: Sidecar = read_json(&sidecar_path(path))?;
        if sidecar.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported version {}", sidecar.version),
            });
        }
        let bytes = read_bytes(path)?;
        let mut r = LeReader::new(&bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { path: path.to_path_buf(), reason: format!("unsupported version {version}") });
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut moments: Vec<(String, Matrix)> = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format { path: path.to_path_buf(), reason: "tensor name is not utf-8".into() })?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let m = Matrix::from_vec(rows, cols, data);
            if name.starts_with("optim.") {
                moments.push((name, m));
            } else {
                params.add(name, m);
            }
        }
        r.finish()?;
        let mut state = sidecar.state;
        if let Some(meta) = sidecar.optimizer {
            let mut opt = AdamW::new(&params, meta.weight_decay);
            opt.beta1 = meta.beta1;
            opt.beta2 = meta.beta2;
            opt.eps = meta.eps;
            opt.clip_norm = meta.clip_norm;
            opt.step = meta.step;
            for (name, m) in moments {
                let (slot, pname) = name
                    .strip_prefix("optim.m/")
                    .map(|p| (0, p))
                    .or_else(|| name.strip_prefix("optim.v/").map(|p| (1, p)))
                    .ok_or_else(|| Error::Format {
                        path: path.to_path_buf(),
                        reason: format!("unknown tensor {name}"),
                    })?;
                let id = params.id(pname).ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("moment for unknown {pname}"),
                })?;
                if slot == 0 {
                    opt.m[id] = m;
                } else {
                    opt.v[id] = m;
                }
            }
            state.optimizer = Some(opt);
        }
        Ok(Checkpoint { kind: sidecar.kind, config: sidecar.config, params, state })
    }

    /// Rejects a checkpoint of another model kind.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }
}

/// Copies every tensor of `source` into `target`; errors unless names and
/// shapes line up exactly.
pub fn restore_params(target: &mut ParamStore, source: &ParamStore) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Shape(format!("checkpoint has {} tensors, model expects {}", source.len(), target.len())));
    }
    for (name, value) in source.iter() {
        let id = target.id(name).ok_or_else(|| Error::Shape(format!("unexpected tensor {name}")))?;
        if target.value(id).shape() != value.shape() {
            return Err(Error::Shape(format!("tensor {name} has shape {:?}", value.shape())));
        }
        *target.value_mut(id) = value.clone();
    }
    Ok(())
}
