//! Model files: `manifest.json` (configuration and ordered parameter layout)
//! plus `params.bin` (float32 little-endian values in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, DenoiserModel, ParamSpec};
use crate::error::{FormatError, Result};

pub const MODEL_FORMAT: &str = "tridiff-denoiser";
pub const MODEL_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub config: DenoiserConfig,
    pub parameter_count: usize,
    pub parameters: Vec<ParamSpec>,
}

impl ModelManifest {
    pub fn for_model(model: &DenoiserModel) -> Self {
        ModelManifest {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: model.config().clone(),
            parameter_count: model.params().len(),
            parameters: model.manifest().to_vec(),
        }
    }

    /// Checks the recorded layout against the layout implied by the config.
    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT {
            return Err(FormatError::Manifest(format!("unexpected format '{}'", self.format)).into());
        }
        if self.version != MODEL_VERSION {
            return Err(FormatError::UnsupportedVersion(self.version).into());
        }
        let expected = self
            .config
            .manifest()
            .map_err(|e| FormatError::Manifest(format!("invalid config: {}", e)))?;
        if expected != self.parameters {
            return Err(FormatError::Manifest("parameter layout does not match the configuration".into()).into());
        }
        let total: usize = expected.iter().map(ParamSpec::len).sum();
        if total != self.parameter_count {
            return Err(FormatError::Manifest(format!("parameter_count {} but layout holds {}", self.parameter_count, total)).into());
        }
        Ok(())
    }
}

pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 4 {
        if bytes.len() < expected * 4 {
            return Err(FormatError::Truncated { expected: expected * 4, actual: bytes.len() }.into());
        }
        return Err(FormatError::TrailingBytes(bytes.len() - expected * 4).into());
    }
    let out: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite.into());
    }
    Ok(out)
}

/// Round every value to the nearest float32 so that saving is lossless.
pub fn round_to_f32(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

impl DenoiserModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = ModelManifest::for_model(self);
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(PARAMS_FILE), encode_f32(self.params()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: ModelManifest =
            serde_json::from_str(&text).map_err(|e| FormatError::Manifest(format!("{}", e)))?;
        manifest.validate()?;
        let params = decode_f32(&fs::read(dir.join(PARAMS_FILE))?, manifest.parameter_count)?;
        DenoiserModel::from_params(manifest.config, params)
    }
}
