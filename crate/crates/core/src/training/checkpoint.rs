//! Binary checkpoint container (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "A2SCKPT1"
//! version    u32
//! config     u32 length + UTF-8 JSON (model/feature/loss configs, batch size,
//!            best validation ROC_AUC, training step)
//! count      u32 number of tensors
//! tensor*    u32 name length + UTF-8 name, u32 rank, rank × u32 dims,
//!            product(dims) × f32 values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::LossConfig;
use crate::features::FeatureConfig;
use crate::towers::{param_shapes, BatchNormStats, ModelConfig, ModelParams, ParamId, Tensor};

pub const MAGIC: &[u8; 8] = b"A2SCKPT1";
pub const FORMAT_VERSION: u32 = 1;

const RUNNING_MEAN: &str = "doc.context.bn.running_mean";
const RUNNING_VAR: &str = "doc.context.bn.running_var";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: expected magic {:?}", String::from_utf8_lossy(MAGIC))]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model layout: {0}")]
    Layout(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub best_valid_auc: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, meta: CheckpointMeta) -> Self {
        let mut tensors: Vec<NamedTensor> = params
            .tensors
            .iter()
            .map(|t| NamedTensor {
                name: t.name.clone(),
                dims: t.shape.clone(),
                values: t.data.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        for (name, v) in [(RUNNING_MEAN, &params.bn.running_mean), (RUNNING_VAR, &params.bn.running_var)] {
            tensors.push(NamedTensor {
                name: name.to_owned(),
                dims: vec![v.len()],
                values: v.iter().map(|&x| x as f32).collect(),
            });
        }
        Self { version: FORMAT_VERSION, meta, tensors }
    }

    pub fn to_params(&self) -> Result<ModelParams, CheckpointError> {
        let find = |name: &str| -> Result<&NamedTensor, CheckpointError> {
            self.tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CheckpointError::Layout(format!("missing tensor {name}")))
        };
        let widen = |t: &NamedTensor| t.values.iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
        let tensors = ParamId::ALL
            .iter()
            .map(|id| {
                let t = find(id.name())?;
                Ok(Tensor { name: t.name.clone(), shape: t.dims.clone(), data: widen(t) })
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        let model = &self.meta.model;
        let params = ModelParams {
            tensors,
            bn: BatchNormStats {
                running_mean: widen(find(RUNNING_MEAN)?),
                running_var: widen(find(RUNNING_VAR)?),
                momentum: model.bn_momentum,
                eps: model.bn_eps,
            },
            embed_dim: model.embed_dim,
            dropout_rate: model.dropout_rate,
        };
        let expected = param_shapes(model, &self.meta.features);
        for (a, shape) in params.tensors.iter().zip(&expected) {
            if &a.shape != shape {
                return Err(CheckpointError::Layout(format!("{} has shape {:?}, expected {:?}", a.name, a.shape, shape)));
            }
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let config = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("config text: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Corrupt("tensor too large".into()))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { version, meta, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Corrupt(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::towers::init_params;

    fn sample() -> Checkpoint {
        let feat = FeatureConfig { trigram_buckets: 16, word_buckets: 8, country_vocab_size: 2, image_dim: 3, context_dim_out: 4, ..Default::default() };
        let model = ModelConfig { embed_dim: 4, fusion_hidden: 3, context_hidden: 2, ..Default::default() };
        let p = init_params(&model, &feat).unwrap();
        Checkpoint::from_params(
            &p,
            CheckpointMeta { model, features: feat, loss: LossConfig::default(), batch_size: 8, best_valid_auc: 0.75, step: 12 },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
        let p = back.to_params().unwrap();
        assert_eq!(Checkpoint::from_params(&p, c.meta.clone()), c);
    }

    #[test]
    fn truncated_and_wrong_magic() {
        let bytes = sample().to_bytes();
        for cut in [4, 12, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Corrupt(_) | CheckpointError::BadMagic)));
        }
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("A2SCKPT1"));
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::Version { found: 2 })));
    }
}
