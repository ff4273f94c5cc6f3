use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::checkpoint::{decode_f32, encode_f32, round_to_f32};
use crate::error::{invalid_arg, shape_err, FormatError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(unit(self.beta1) && unit(self.beta2) && self.epsilon > 0.0) {
            return Err(invalid_arg("Adam needs betas in [0, 1) and a positive epsilon"));
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"TDOP";
const VERSION: u32 = 1;

/// Adam moments. Parameters and moments are rounded to f32 after every step
/// so that the state written to disk is exactly the state in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Adam { config, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(format!("optimizer holds {} moments, got {} params", self.m.len(), params.len())));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + epsilon);
        }
        round_to_f32(params);
        round_to_f32(&mut self.m);
        round_to_f32(&mut self.v);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&self.step.to_le_bytes());
        bytes.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        bytes.extend(encode_f32(&self.m));
        bytes.extend(encode_f32(&self.v));
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path, config: AdamConfig, expected: usize) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 24 {
            return Err(FormatError::Truncated { expected: 24, actual: bytes.len() }.into());
        }
        if &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic(bytes[..4].try_into().expect("4 bytes")).into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let step = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let n = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        if n != expected {
            return Err(FormatError::Manifest(format!("optimizer holds {} moments, model has {}", n, expected)).into());
        }
        let both = decode_f32(&bytes[24..], 2 * n)?;
        let (m, v) = both.split_at(n);
        Ok(Adam { config, step, m: m.to_vec(), v: v.to_vec() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * g / (|g| + eps)
        let mut a = Adam::new(AdamConfig::default(), 2);
        let mut p = vec![1.0, -1.0];
        a.update(&mut p, &[0.5, -2.0], 0.01).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-7);
        assert!((p[1] + 0.99).abs() < 1e-7);
        assert!(a.update(&mut p, &[1.0], 0.01).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(AdamConfig::default(), 3);
        let target = [0.3, -0.7, 2.0];
        let mut p = vec![0.0; 3];
        for _ in 0..3000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            a.update(&mut p, &g, 0.01).unwrap();
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-3);
        }
    }

    #[test]
    fn state_round_trips_bitwise() {
        let mut a = Adam::new(AdamConfig::default(), 4);
        let mut p = vec![0.1, 0.2, 0.3, 0.4];
        a.update(&mut p, &[0.3, -0.1, 1e-3, 7.0], 1e-3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.bin");
        a.save(&path).unwrap();
        assert_eq!(Adam::load(&path, AdamConfig::default(), 4).unwrap(), a);
        assert!(Adam::load(&path, AdamConfig::default(), 5).is_err());
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert_eq!(Adam::load(&path, AdamConfig::default(), 4).unwrap_err().exit_code(), 2);
    }
}
