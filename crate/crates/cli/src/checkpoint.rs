//! Checkpoint directories: `manifest.json` plus one little-endian f32 blob
//! per named parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rvae_core::vae::{Architecture, Preset, VaeModel};

use crate::error::{io, CliError, Result};
use crate::source::DataSpec;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One row of the training metrics file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Mean certified bound over the training epoch.
    pub lb_train: f64,
    /// Mean certified bound on the test split.
    pub lb_test: f64,
    /// Mean clean ELBO on the test split.
    pub elbo_test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `dense` or `conv`.
    pub preset: String,
    /// Hidden widths of the dense preset; empty for conv.
    pub hidden: Vec<usize>,
    pub data_shape: Vec<usize>,
    pub latent_dim: usize,
    pub sigma0: f64,
    pub eps_train: f64,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub data: DataSpec,
    pub metrics: Vec<MetricsRow>,
    pub params: Vec<ParamEntry>,
}

impl Manifest {
    pub fn architecture(&self) -> Result<Architecture> {
        match self.preset.as_str() {
            "dense" => Ok(Architecture::dense(&self.data_shape, self.latent_dim, &self.hidden)),
            "conv" => Ok(Architecture::conv(&self.data_shape, self.latent_dim)),
            other => Err(CliError::Usage(format!("unknown architecture preset {other:?}"))),
        }
    }
}

/// Training provenance recorded alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RunInfo {
    pub eps_train: f64,
    pub seed: u64,
    pub epoch: usize,
    pub data: DataSpec,
    pub metrics: Vec<MetricsRow>,
}

pub fn save_checkpoint(dir: &Path, model: &VaeModel, info: &RunInfo) -> Result<Manifest> {
    let arch = model.architecture();
    let hidden = match &arch.preset {
        Preset::Dense { hidden } => hidden.clone(),
        Preset::Conv => Vec::new(),
        Preset::Custom => {
            return Err(CliError::Usage("hand-built models cannot be checkpointed".into()));
        }
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut params = Vec::new();
    for (name, t) in model.params() {
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        params.push(ParamEntry { name, shape: t.dims().to_vec(), file });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        preset: arch.preset.id().to_string(),
        hidden,
        data_shape: arch.data_shape.clone(),
        latent_dim: arch.latent_dim,
        sigma0: model.sigma0(),
        eps_train: info.eps_train,
        seed: info.seed,
        epoch: info.epoch,
        data: info.data.clone(),
        metrics: info.metrics.clone(),
        params,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| CliError::Manifest { path: path.clone(), source })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::Version { found: manifest.format_version, expected: FORMAT_VERSION });
    }
    Ok(manifest)
}

/// Rebuilds the model recorded in `dir`; parameters are the stored f32
/// values widened to f64.
pub fn load_checkpoint(dir: &Path) -> Result<(VaeModel, Manifest)> {
    let manifest = load_manifest(dir)?;
    let mut model = VaeModel::new(manifest.architecture()?, manifest.sigma0, manifest.seed)?;
    let mut slots = model.params_mut();
    if slots.len() != manifest.params.len() {
        return Err(CliError::Usage(format!(
            "manifest lists {} parameters, architecture has {}",
            manifest.params.len(),
            slots.len()
        )));
    }
    for ((name, t), entry) in slots.iter_mut().zip(&manifest.params) {
        let mismatch = |msg: String| CliError::Param { name: entry.name.clone(), msg };
        if *name != entry.name {
            return Err(mismatch(format!("architecture expects {name} at this position")));
        }
        if t.dims() != entry.shape.as_slice() {
            return Err(mismatch(format!("shape {:?} does not match architecture {:?}", entry.shape, t.dims())));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| io(&path, e))?;
        if bytes.len() != t.numel() * 4 {
            return Err(mismatch(format!(
                "blob holds {} bytes, shape {:?} needs {}",
                bytes.len(),
                entry.shape,
                t.numel() * 4
            )));
        }
        for (v, b) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    drop(slots);
    Ok((model, manifest))
}
