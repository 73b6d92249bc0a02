use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{KwsModel, KwsModelConfig};
use crate::archive;
use crate::error::{KwsError, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_KIND: &str = "kws-checkpoint";

/// Adam first/second moments, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerMoments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// A model plus the training bookkeeping needed to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: KwsModel,
    pub step: u64,
    /// Named seeds the run was derived from.
    pub seeds: BTreeMap<String, u64>,
    pub optimizer: Option<OptimizerMoments>,
    pub loss_history: Vec<f64>,
    /// Free-form metadata (variant, best dev EER, ...).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: KwsModelConfig,
    step: u64,
    seeds: BTreeMap<String, u64>,
    has_optimizer: bool,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: KwsModel) -> Self {
        Self {
            model,
            step: 0,
            seeds: BTreeMap::new(),
            optimizer: None,
            loss_history: Vec::new(),
            meta: json!({}),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: CHECKPOINT_KIND.into(),
            config: self.model.config().clone(),
            step: self.step,
            seeds: self.seeds.clone(),
            has_optimizer: self.optimizer.is_some(),
            meta: self.meta.clone(),
        };
        let named = self.model.named_params();
        let mut tensors: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (format!("model/{n}"), *t)).collect();
        if let Some(opt) = &self.optimizer {
            for ((n, _), m) in named.iter().zip(&opt.m) {
                tensors.push((format!("adam.m/{n}"), m));
            }
            for ((n, _), v) in named.iter().zip(&opt.v) {
                tensors.push((format!("adam.v/{n}"), v));
            }
        }
        let history = (!self.loss_history.is_empty()).then(|| Tensor::vector(self.loss_history.clone()));
        if let Some(h) = &history {
            tensors.push(("train/loss_history".into(), h));
        }
        archive::encode(&serde_json::to_value(header)?, &tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| KwsError::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| KwsError::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut ar = archive::decode(bytes, path)?;
        let corrupt = |reason: String| KwsError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let header: Header =
            serde_json::from_value(ar.header.clone()).map_err(|e| corrupt(format!("checkpoint header: {e}")))?;
        if header.kind != CHECKPOINT_KIND {
            return Err(corrupt(format!("not a checkpoint (kind `{}`)", header.kind)));
        }
        let mut model = KwsModel::build(&header.config, 0)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut take = |key: String, expected: &[usize]| -> Result<Tensor> {
            let t = ar.take(&key).ok_or_else(|| corrupt(format!("missing tensor `{key}`")))?;
            if t.shape() != expected {
                return Err(KwsError::ShapeMismatch {
                    name: key,
                    found: t.shape().to_vec(),
                    expected: expected.to_vec(),
                });
            }
            Ok(t)
        };
        let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        for ((slot, name), shape) in model.params_mut().into_iter().zip(&names).zip(&shapes) {
            *slot = take(format!("model/{name}"), shape)?;
        }
        let optimizer = if header.has_optimizer {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, shape) in names.iter().zip(&shapes) {
                m.push(take(format!("adam.m/{name}"), shape)?);
            }
            for (name, shape) in names.iter().zip(&shapes) {
                v.push(take(format!("adam.v/{name}"), shape)?);
            }
            Some(OptimizerMoments { m, v })
        } else {
            None
        };
        let loss_history = ar.take("train/loss_history").map(Tensor::into_data).unwrap_or_default();
        if let Some((extra, _)) = ar.tensors.first() {
            return Err(corrupt(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            model,
            step: header.step,
            seeds: header.seeds,
            optimizer,
            loss_history,
            meta: header.meta,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and insists the stored architecture equals `expected`.
    pub fn load_expecting(path: &Path, expected: &KwsModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.model.config() != expected {
            return Err(KwsError::ConfigMismatch(format!(
                "checkpoint {} has conditioning {:?} and {} encoder layers; expected conditioning {:?} and {} encoder layers",
                path.display(),
                ckpt.model.config().conditioning,
                ckpt.model.config().encoder.len(),
                expected.conditioning,
                expected.encoder.len(),
            )));
        }
        Ok(ckpt)
    }
}

impl KwsModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_model(self.clone()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Checkpoint::load(path)?.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Conditioning;

    #[test]
    fn round_trip_with_optimizer_state() {
        let c = KwsModelConfig::desk(5, Conditioning::Film { embedding_dim: 3 });
        let model = KwsModel::build(&c, 11).unwrap();
        let m: Vec<Tensor> = model.param_tensors();
        let v: Vec<Tensor> = m.iter().map(|t| Tensor::filled(t.shape(), 0.5)).collect();
        let mut ck = Checkpoint::from_model(model);
        ck.step = 42;
        ck.seeds.insert("master".into(), 7);
        ck.optimizer = Some(OptimizerMoments { m, v });
        ck.loss_history = vec![0.7, 0.31, 0.1];
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
