//! Checkpoint directories: `manifest.json` plus little-endian tensor blobs.
//!
//! Blob layout, repeated per tensor in manifest order: `u32` name length,
//! UTF-8 name, `u32` rank, `rank × u32` dims, then `f32` values in row-major
//! order. All integers are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::model::{LisnConfig, LisnModel};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint has no tensor `{name}`")]
    MissingTensor { name: String },
    #[error("tensor `{name}` has shape {found:?} in the checkpoint, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint architecture differs from the model: {0}")]
    ConfigMismatch(String),
    #[error("{}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: LisnConfig,
    /// Completed training epochs.
    pub epoch: usize,
    pub optimizer_included: bool,
    pub adam_step: Option<u64>,
    pub params: Vec<TensorEntry>,
}

/// A fully loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: LisnModel<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        CheckpointError::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
        .into()
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| self.corrupt("tensor name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = self
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn decode(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        out.push(r.tensor()?);
    }
    Ok(out)
}

fn entries(store: &ParamStore<f32>) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect()
}

/// Writes `model` (and optionally its optimizer state) into `dir`. Each file
/// is written to a temporary name and renamed; the manifest goes last.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &LisnModel<f32>,
    optimizer: Option<&AdamState<f32>>,
    epoch: usize,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let store = model.params();
    write_atomic(&dir.join(PARAMS_FILE), &encode(store.iter().map(|p| (p.name.as_str(), &p.value))))?;

    let opt_path = dir.join(OPTIMIZER_FILE);
    if let Some(state) = optimizer {
        let mut names = Vec::with_capacity(2 * store.len());
        for p in store.iter() {
            names.push(format!("m/{}", p.name));
        }
        for p in store.iter() {
            names.push(format!("v/{}", p.name));
        }
        let tensors = state.m.iter().chain(&state.v);
        write_atomic(&opt_path, &encode(names.iter().map(String::as_str).zip(tensors)))?;
    } else if opt_path.exists() {
        fs::remove_file(&opt_path).map_err(|e| Error::io(&opt_path, e))?;
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        epoch,
        optimizer_included: optimizer.is_some(),
        adam_step: optimizer.map(|s| s.step),
        params: entries(store),
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| CheckpointError::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    serde_json::from_value(raw).map_err(|e| {
        CheckpointError::Corrupt {
            path,
            reason: e.to_string(),
        }
        .into()
    })
}

/// Copies `tensors` into `store` by name, requiring every parameter to be present with its shape.
fn assign(store: &mut ParamStore<f32>, tensors: Vec<(String, Tensor<f32>)>, prefix: &str) -> Result<Vec<Tensor<f32>>> {
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    let mut out = Vec::with_capacity(store.len());
    for p in store.iter() {
        let key = format!("{prefix}{}", p.name);
        let t = by_name.remove(&key).ok_or(CheckpointError::MissingTensor { name: key.clone() })?;
        if t.shape() != p.value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: key,
                expected: p.value.shape().to_vec(),
                found: t.shape().to_vec(),
            }
            .into());
        }
        out.push(t);
    }
    Ok(out)
}

fn first_config_difference(a: &LisnConfig, b: &LisnConfig) -> String {
    let (ja, jb) = (serde_json::to_value(a).expect("config"), serde_json::to_value(b).expect("config"));
    if let (Some(ma), Some(mb)) = (ja.as_object(), jb.as_object()) {
        for (k, va) in ma {
            if mb.get(k) != Some(va) {
                return format!("`{k}` is {} in the checkpoint, {va} in the model", mb.get(k).cloned().unwrap_or_default());
            }
        }
    }
    "configurations differ".into()
}

/// Loads parameters into an existing model. The first parameter that is
/// missing or shaped differently is reported; a remaining architecture
/// difference is reported by field.
pub fn load_into(dir: impl AsRef<Path>, model: &mut LisnModel<f32>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let declared: std::collections::HashMap<&str, &[usize]> =
        manifest.params.iter().map(|e| (e.name.as_str(), e.shape.as_slice())).collect();
    for p in model.params().iter() {
        match declared.get(p.name.as_str()) {
            None => return Err(CheckpointError::MissingTensor { name: p.name.clone() }.into()),
            Some(&shape) if shape != p.value.shape() => {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: shape.to_vec(),
                }
                .into())
            }
            _ => {}
        }
    }
    if manifest.config != *model.config() {
        return Err(CheckpointError::ConfigMismatch(first_config_difference(model.config(), &manifest.config)).into());
    }
    let values = assign(model.params_mut(), decode(&dir.join(PARAMS_FILE))?, "")?;
    for (p, v) in model.params_mut().iter_mut().zip(values) {
        p.value = v;
    }
    Ok(manifest)
}

/// Rebuilds the model described by the manifest and loads everything.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut model = LisnModel::<f32>::build(&manifest.config, 0)?;
    load_into(dir, &mut model)?;
    let optimizer = if manifest.optimizer_included {
        let path = dir.join(OPTIMIZER_FILE);
        let tensors = decode(&path)?;
        let (m_part, v_part): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with("m/"));
        let m = assign(model.params_mut(), m_part, "m/")?;
        let v = assign(model.params_mut(), v_part, "v/")?;
        Some(AdamState {
            config: AdamConfig::default(),
            step: manifest.adam_step.unwrap_or(0),
            m,
            v,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        manifest,
        model,
        optimizer,
    })
}
