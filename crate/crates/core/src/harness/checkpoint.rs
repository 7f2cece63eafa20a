//! Versioned parameter archives in safetensors layout.
//!
//! Tensors are stored as `param.<name>` and, for resumable checkpoints,
//! `opt.m.<name>` / `opt.v.<name>`. The header metadata carries the format
//! tag, version, run progress and the full configuration as JSON.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::harness::config::{config_hash, TrainConfig};
use crate::model::{ModelConfig, PriorMotion};
use crate::nn::Adam;

pub const CHECKPOINT_FORMAT: &str = "priormotion-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Run configuration embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grid: GridSpec,
}

impl RunConfig {
    pub fn hash(&self) -> Result<u64> {
        config_hash(&self.model, &self.train, &self.grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    pub config: RunConfig,
    pub config_hash: u64,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: HashMap<String, Tensor>,
    pub optimizer: Option<HashMap<String, Tensor>>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), reason.into()))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &PriorMotion, optimizer: Option<&Adam>, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    let mut tensors: Vec<(String, Tensor)> = model
        .store()
        .snapshot()?
        .into_iter()
        .map(|(k, v)| (format!("param.{k}"), v))
        .collect();
    let mut step = meta.step;
    if let Some(opt) = optimizer {
        let (state, s) = opt.state()?;
        step = s;
        tensors.extend(state.into_iter().map(|(k, v)| (format!("opt.{k}"), v)));
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let mut header = HashMap::new();
    header.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    header.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    header.insert("epoch".to_string(), meta.epoch.to_string());
    header.insert("step".to_string(), step.to_string());
    header.insert("config_hash".to_string(), format!("{:016x}", meta.config_hash));
    header.insert(
        "config".to_string(),
        serde_json::to_string(&meta.config).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let partial = PathBuf::from(format!("{}.partial", path.display()));
    safetensors::serialize_to_file(tensors, Some(header), &partial).map_err(|e| corrupt(path, e.to_string()))?;
    std::fs::rename(&partial, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(path, e.to_string()))?;
    let info = header.metadata().clone().ok_or_else(|| corrupt(path, "missing metadata"))?;
    let field = |k: &str| info.get(k).ok_or_else(|| corrupt(path, format!("missing metadata key {k}")));
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(corrupt(path, "not a checkpoint"));
    }
    let version: u32 = field("version")?.parse().map_err(|_| corrupt(path, "bad version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(path, format!("unsupported checkpoint version {version}")));
    }
    let config: RunConfig = serde_json::from_str(field("config")?).map_err(|e| corrupt(path, e.to_string()))?;
    let stored_hash = u64::from_str_radix(field("config_hash")?, 16).map_err(|_| corrupt(path, "bad config hash"))?;
    if config.hash()? != stored_hash {
        return Err(corrupt(path, "embedded config does not match its hash"));
    }
    let meta = CheckpointMeta {
        epoch: field("epoch")?.parse().map_err(|_| corrupt(path, "bad epoch"))?,
        step: field("step")?.parse().map_err(|_| corrupt(path, "bad step"))?,
        config,
        config_hash: stored_hash,
    };
    let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let mut params = HashMap::new();
    let mut opt = HashMap::new();
    for (k, v) in all {
        if let Some(name) = k.strip_prefix("param.") {
            params.insert(name.to_string(), v);
        } else if let Some(name) = k.strip_prefix("opt.") {
            opt.insert(name.to_string(), v);
        }
    }
    Ok(Checkpoint { meta, params, optimizer: (!opt.is_empty()).then_some(opt) })
}

impl Checkpoint {
    /// Rebuilds the model and loads its parameters.
    pub fn build_model(&self) -> Result<PriorMotion> {
        let cfg = &self.meta.config;
        let model = PriorMotion::new(cfg.model.clone(), cfg.grid.clone(), cfg.train.seed, cfg.train.dtype()?)?;
        model.store().load(&self.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Switches;

    fn tiny() -> RunConfig {
        let mut model = ModelConfig::default();
        model.backbone.stem_channels = 4;
        model.backbone.pyramid_channels = [8, 8, 8];
        model.backbone.out_channels = 8;
        model.switches = Switches::new(false, true, true, true);
        let grid = GridSpec::new([-4.0, 4.0], [-4.0, 4.0], [-3.0, 2.0], 0.5, 0.4, 0.2, 5, 5).unwrap();
        RunConfig { model, train: TrainConfig::default(), grid }
    }

    #[test]
    fn round_trip_restores_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let model = PriorMotion::new(cfg.model.clone(), cfg.grid.clone(), 11, candle_core::DType::F32).unwrap();
        let meta = CheckpointMeta { epoch: 2, step: 7, config_hash: cfg.hash().unwrap(), config: cfg };
        let path = dir.path().join("ck.safetensors");
        save_checkpoint(&path, &model, None, &meta).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta, meta);
        assert!(ck.optimizer.is_none());
        let rebuilt = ck.build_model().unwrap();
        let a = model.store().snapshot().unwrap();
        let b = rebuilt.store().snapshot().unwrap();
        assert_eq!(a.len(), b.len());
        for (k, v) in &a {
            let x: Vec<f32> = v.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = b[k].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y, "{k}");
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
