//! Tensor archives: safetensors files with string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const FORMAT_KEY: &str = "format";

/// Writes `tensors` as f32 together with `metadata`.
pub fn save_archive(
    path: impl AsRef<Path>,
    tensors: &BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    let mut data = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        data.push((name.clone(), t.to_dtype(DType::F32)?.contiguous()?));
    }
    let meta: HashMap<String, String> = metadata.into_iter().collect();
    safetensors::serialize_to_file(data, Some(meta), path.as_ref())?;
    Ok(())
}

/// Reads an archive and checks that its format tag equals `format`.
pub fn load_archive(
    path: impl AsRef<Path>,
    format: &str,
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let st = safetensors::SafeTensors::deserialize(&bytes)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    match metadata.get(FORMAT_KEY) {
        Some(f) if f == format => {}
        other => {
            return Err(Error::CheckpointFormat(format!(
                "{}: expected format {format:?}, found {other:?}",
                path.display()
            )))
        }
    }
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        tensors.insert(name, view.load(&Device::Cpu)?);
    }
    Ok((tensors, metadata))
}

pub fn meta_get<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::CheckpointFormat(format!("missing metadata key {key:?}")))
}
