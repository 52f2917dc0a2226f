//! Safetensors checkpoints with the policy configuration in the header metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::model::Policy;
use super::PolicyConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "gridrocket-policy-v1";

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    let (dtype, tag) = match policy.dtype() {
        DType::F64 => (Dtype::F64, "f64"),
        _ => (Dtype::F32, "f32"),
    };
    let mut blobs = Vec::new();
    for (name, var) in policy.vars() {
        let t = var.as_tensor().flatten_all()?;
        let bytes: Vec<u8> = match dtype {
            Dtype::F64 => t
                .to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
            _ => t
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        };
        blobs.push((name, var.as_tensor().dims().to_vec(), bytes));
    }
    let views = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            Ok((
                name.clone(),
                TensorView::new(dtype, shape.clone(), bytes).map_err(|e| ckpt_err(path, e))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("dtype".to_string(), tag.to_string()),
        (
            "config".to_string(),
            serde_json::to_string(policy.config())?,
        ),
    ]);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    safetensors::tensor::serialize_to_file(views, Some(metadata), path)
        .map_err(|e| ckpt_err(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    let buf = fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| ckpt_err(path, e))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(ckpt_err(
            path,
            format!("not a {CHECKPOINT_FORMAT} checkpoint"),
        ));
    }
    let cfg: PolicyConfig = serde_json::from_str(
        meta.get("config")
            .ok_or_else(|| ckpt_err(path, "missing config"))?,
    )?;
    let dtype = match meta.get("dtype").map(String::as_str) {
        Some("f64") => DType::F64,
        _ => DType::F32,
    };
    let policy = Policy::new(&cfg, 0, dtype)?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| ckpt_err(path, e))?;
    let stored = st.tensors().len();
    let vars = policy.vars();
    if stored != vars.len() {
        return Err(ckpt_err(
            path,
            format!("{stored} tensors stored, model has {}", vars.len()),
        ));
    }
    for (name, var) in vars {
        let view = st
            .tensor(&name)
            .map_err(|e| ckpt_err(path, format!("{name}: {e}")))?;
        if view.shape() != var.as_tensor().dims() {
            return Err(ckpt_err(
                path,
                format!(
                    "{name}: shape {:?} vs {:?}",
                    view.shape(),
                    var.as_tensor().dims()
                ),
            ));
        }
        let t = match view.dtype() {
            Dtype::F64 => {
                let v: Vec<f64> = view
                    .data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            Dtype::F32 => {
                let v: Vec<f32> = view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            other => {
                return Err(ckpt_err(
                    path,
                    format!("{name}: unsupported dtype {other:?}"),
                ))
            }
        };
        var.set(&t.to_dtype(dtype)?)?;
    }
    Ok(policy)
}
