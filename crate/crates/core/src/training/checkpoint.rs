use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};

use super::TrainConfig;
use crate::checkpoint::{load_archive, meta_get, save_archive, FORMAT_KEY};
use crate::control::{ControlConfig, ControlModel};
use crate::diffusion::Backbone;
use crate::error::{Error, Result};

pub const CONTROL_FORMAT: &str = "region-restore-control/1";

const OPTIM_PREFIX: &str = "optim.";

/// Control-branch and mask-decoder parameters with everything needed to
/// resume training or to run inference against the matching backbone.
#[derive(Debug, Clone)]
pub struct ControlCheckpoint {
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
    pub step: u64,
    pub skipped_steps: u64,
    pub train_config: TrainConfig,
    pub control_config: ControlConfig,
    pub backbone_id: String,
    /// Where the backbone archive lived when training ran, if known.
    pub backbone_path: Option<String>,
}

impl ControlCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = self.params.clone();
        tensors.extend(self.optimizer.iter().map(|(k, v)| (k.clone(), v.clone())));
        let mut meta = BTreeMap::new();
        meta.insert(FORMAT_KEY.to_string(), CONTROL_FORMAT.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("skipped_steps".into(), self.skipped_steps.to_string());
        meta.insert("train_config".into(), serde_json::to_string(&self.train_config)?);
        meta.insert("control_config".into(), serde_json::to_string(&self.control_config)?);
        meta.insert("backbone_id".into(), self.backbone_id.clone());
        if let Some(p) = &self.backbone_path {
            meta.insert("backbone_path".into(), p.clone());
        }
        save_archive(path, &tensors, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (tensors, meta) = load_archive(path, CONTROL_FORMAT)?;
        let parse_u64 = |key: &str| -> Result<u64> {
            meta_get(&meta, key)?
                .parse()
                .map_err(|e| Error::CheckpointFormat(format!("{key}: {e}")))
        };
        let (optimizer, params) = tensors.into_iter().partition(|(k, _)| k.starts_with(OPTIM_PREFIX));
        Ok(Self {
            params,
            optimizer,
            step: parse_u64("step")?,
            skipped_steps: parse_u64("skipped_steps")?,
            train_config: serde_json::from_str(meta_get(&meta, "train_config")?)?,
            control_config: serde_json::from_str(meta_get(&meta, "control_config")?)?,
            backbone_id: meta_get(&meta, "backbone_id")?.to_string(),
            backbone_path: meta.get("backbone_path").cloned(),
        })
    }

    /// Errors unless `backbone` is the one this checkpoint was trained on.
    /// Ids are only comparable for f32 backbones.
    pub fn check_backbone(&self, backbone: &Backbone) -> Result<()> {
        if backbone.dtype() == DType::F32 && backbone.id() != self.backbone_id {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint expects backbone {} but got {}",
                self.backbone_id,
                backbone.id()
            )));
        }
        Ok(())
    }

    /// Frozen control model on `backbone`.
    pub fn model(&self, backbone: &Backbone) -> Result<ControlModel> {
        self.check_backbone(backbone)?;
        let (mut model, _) = ControlModel::build(backbone, &self.control_config, self.params.clone(), true, 0, false)?;
        model.backbone_id = self.backbone_id.clone();
        Ok(model)
    }
}
