use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::diffusion::{ancestral_sample, ScheduleConfig};
use crate::error::{shape_err, FormatError, Result};
use crate::rng::{self, derive_seed};
use crate::skeleton::{EncodingConfig, MotionSequence, Skeleton};
use crate::triplane::{build_condition, Triplane};

pub const SETTINGS_FILE: &str = "sampling.json";

/// What a checkpoint needs besides its weights to generate: the noise
/// schedule and the skeleton encoding it was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReposeSettings {
    pub schedule: ScheduleConfig,
    pub encoding: EncodingConfig,
}

impl ReposeSettings {
    pub fn for_model(cfg: &DenoiserConfig) -> Self {
        ReposeSettings { schedule: ScheduleConfig::scaled_linear(cfg.diffusion_steps), encoding: EncodingConfig::default() }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SETTINGS_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_or_default(dir: &Path, cfg: &DenoiserConfig) -> Result<Self> {
        let path = dir.join(SETTINGS_FILE);
        if !path.exists() {
            return Ok(Self::for_model(cfg));
        }
        let s: ReposeSettings = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| FormatError::Manifest(format!("{}: {}", SETTINGS_FILE, e)))?;
        if s.schedule.steps != cfg.diffusion_steps {
            return Err(FormatError::Manifest("sampling schedule length differs from the model".into()).into());
        }
        Ok(s)
    }
}

/// One full reverse diffusion from noise to the triplane of `init`'s
/// character in the pose of `target`.
pub fn repose(model: &DenoiserModel, init: &Triplane, target: &Skeleton, settings: &ReposeSettings, seed: u64) -> Result<Triplane> {
    let cfg = model.config();
    let (c, h, w) = (init.channels(), init.height(), init.width());
    if c != cfg.channels || h != cfg.resolution || w != cfg.resolution {
        return Err(shape_err(format!(
            "triplane is C = {} at {}x{}, the model expects C = {} at {}x{}",
            c, h, w, cfg.channels, cfg.resolution, cfg.resolution
        )));
    }
    let maps = settings.encoding.condition_maps(target, init.bounds(), h, w, c)?;
    let condition = build_condition(init, &maps)?;
    let sched = settings.schedule.build()?;
    let mut r = rng::seeded(seed);
    let latent = ancestral_sample(model, &condition, &sched, &mut r, &cfg.latent_shape())?;
    init.with_latent(&latent)
}

/// [`animate_with`] collecting all frames.
pub fn animate(
    model: &DenoiserModel,
    init: &Triplane,
    motion: &MotionSequence,
    settings: &ReposeSettings,
    seed: u64,
    chain: bool,
) -> Result<Vec<Triplane>> {
    let mut frames = Vec::with_capacity(motion.frames().len());
    animate_with(model, init, motion, settings, seed, chain, |_, f| {
        frames.push(f.clone());
        Ok(())
    })?;
    Ok(frames)
}

/// Frame `t` is `repose(init, motion[t], derive_seed(seed, t))`. With `chain`
/// the previous output replaces `init` as the appearance condition. Each
/// frame is handed to `on_frame` as soon as it exists.
pub fn animate_with(
    model: &DenoiserModel,
    init: &Triplane,
    motion: &MotionSequence,
    settings: &ReposeSettings,
    seed: u64,
    chain: bool,
    mut on_frame: impl FnMut(usize, &Triplane) -> Result<()>,
) -> Result<()> {
    let mut anchor = init.clone();
    for (t, skel) in motion.frames().iter().enumerate() {
        let frame = repose(model, &anchor, skel, settings, derive_seed(seed, t as u64))?;
        on_frame(t, &frame)?;
        if chain {
            anchor = frame;
        }
    }
    Ok(())
}
