//! Checkpoint locations. A training output directory holds
//! `backbone.safetensors` next to `control-final.safetensors`; a control
//! archive may also be named directly.

use std::path::{Path, PathBuf};

use region_restore::inference::Restorer;
use region_restore::training::ControlCheckpoint;
use region_restore::{Error, Result};

pub const BACKBONE_FILE: &str = "backbone.safetensors";
pub const CONTROL_FILE: &str = "control-final.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CKPT_ENV: &str = "REGION_RESTORE_CKPT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPaths {
    pub backbone: PathBuf,
    pub control: PathBuf,
}

impl CheckpointPaths {
    pub fn resolve(path: &Path) -> Result<Self> {
        if path.is_dir() {
            return Ok(Self {
                backbone: path.join(BACKBONE_FILE),
                control: path.join(CONTROL_FILE),
            });
        }
        if !path.is_file() {
            return Err(Error::CheckpointFormat(format!("no checkpoint at {}", path.display())));
        }
        let sibling = path.parent().unwrap_or(Path::new(".")).join(BACKBONE_FILE);
        let backbone = if sibling.is_file() {
            sibling
        } else {
            let ckpt = ControlCheckpoint::load(path)?;
            ckpt.backbone_path.map(PathBuf::from).ok_or_else(|| {
                Error::CheckpointFormat(format!("cannot locate the backbone for {}", path.display()))
            })?
        };
        Ok(Self {
            backbone,
            control: path.to_path_buf(),
        })
    }
}

/// A restorer plus a short identifier for the checkpoint it came from.
pub fn load_restorer(path: &Path) -> Result<(Restorer, String)> {
    let paths = CheckpointPaths::resolve(path)?;
    let ckpt = ControlCheckpoint::load(&paths.control)?;
    let backbone = region_restore::diffusion::Backbone::load(&paths.backbone, candle_core::DType::F32)?;
    let id = checkpoint_id(&ckpt);
    Ok((Restorer::from_checkpoint(backbone, &ckpt)?, id))
}

pub fn checkpoint_id(ckpt: &ControlCheckpoint) -> String {
    let short: String = ckpt.backbone_id.chars().take(16).collect();
    format!("{short}-step{}", ckpt.step)
}
