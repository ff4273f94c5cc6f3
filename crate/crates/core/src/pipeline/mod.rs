//! Training loop, optimizer schedules, reposing and multi-frame generation.

mod generate;
mod metrics;
mod optim;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{invalid_arg, Result};
use crate::renderer::AnalyticDecoder;
use crate::skeleton::EncodingConfig;

pub use generate::{animate, animate_with, repose, ReposeSettings, SETTINGS_FILE};
pub use metrics::{dilate, geometry_psnr, support_iou, support_mask};
pub use optim::{Adam, AdamConfig};
pub use train::{
    load_checkpoint, train, LogEntry, PreparedSample, TrainState, TrainSummary, Trainer, TrainingData, OPTIMIZER_FILE,
    STATE_FILE,
};

/// Count of auxiliary reconstructions used up to and including `until`
/// (`None` for all remaining iterations).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconStage {
    pub until: Option<u64>,
    pub count: usize,
}

impl ReconStage {
    pub const fn new(until: Option<u64>, count: usize) -> Self {
        ReconStage { until, count }
    }
}

/// 30 / 15 / 5 / 1 reconstructions per iteration for the reposing model.
pub fn reposing_ladder() -> Vec<ReconStage> {
    vec![
        ReconStage::new(Some(50_000), 30),
        ReconStage::new(Some(300_000), 15),
        ReconStage::new(Some(800_000), 5),
        ReconStage::new(None, 1),
    ]
}

/// 15 / 3 / 1 reconstructions per iteration for the static avatar model.
pub fn static_avatar_ladder() -> Vec<ReconStage> {
    vec![ReconStage::new(Some(50_000), 15), ReconStage::new(Some(100_000), 3), ReconStage::new(None, 1)]
}

/// Render settings of the auxiliary reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRender {
    pub size: usize,
    pub samples: usize,
    pub density_scale: f64,
    pub decoder: AnalyticDecoder,
}

impl Default for ReconRender {
    fn default() -> Self {
        ReconRender { size: 16, samples: 32, density_scale: 5.0, decoder: AnalyticDecoder::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_boundaries")]
    pub decay_boundaries: Vec<u64>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "reposing_ladder")]
    pub reconstructions: Vec<ReconStage>,
    #[serde(default = "default_recon_weight")]
    pub recon_weight: f64,
    #[serde(default)]
    pub recon_render: ReconRender,
    #[serde(default)]
    pub seed: u64,
    /// Dataset directory written by `synth-dataset`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Where the run log and checkpoints go.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub encoding: EncodingConfig,
    #[serde(default = "default_cadence")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_warmup() -> u64 {
    500
}
fn default_boundaries() -> Vec<u64> {
    vec![500_000]
}
fn default_decay() -> f64 {
    0.5
}
fn default_batch() -> usize {
    4
}
fn default_recon_weight() -> f64 {
    0.1
}
fn default_cadence() -> u64 {
    1000
}

impl TrainConfig {
    /// Desk-scale defaults around a denoiser configuration.
    pub fn new(denoiser: DenoiserConfig, iterations: u64) -> Self {
        let schedule = ScheduleConfig::scaled_linear(denoiser.diffusion_steps);
        TrainConfig {
            learning_rate: default_lr(),
            warmup: default_warmup().min(iterations.saturating_sub(1)),
            decay_boundaries: default_boundaries(),
            decay_factor: default_decay(),
            iterations,
            batch_size: default_batch(),
            reconstructions: reposing_ladder(),
            recon_weight: default_recon_weight(),
            recon_render: ReconRender::default(),
            seed: 0,
            dataset: None,
            output_dir: None,
            denoiser,
            schedule,
            encoding: EncodingConfig::default(),
            checkpoint_every: default_cadence(),
            adam: AdamConfig::default(),
            max_grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.iterations == 0 {
            return Err(invalid_arg("iterations must be at least 1"));
        }
        if self.warmup >= self.iterations {
            return Err(invalid_arg(format!("warmup {} must be below the iteration count {}", self.warmup, self.iterations)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid_arg("learning rate must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(invalid_arg("decay factor must be positive"));
        }
        if self.decay_boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid_arg("decay boundaries must be strictly increasing"));
        }
        if self.batch_size == 0 {
            return Err(invalid_arg("batch size must be at least 1"));
        }
        validate_ladder(&self.reconstructions)?;
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return Err(invalid_arg("reconstruction weight must be finite and non-negative"));
        }
        if self.recon_render.size < 8 || self.recon_render.samples < 2 {
            return Err(invalid_arg("reconstruction renders need size >= 8 and >= 2 samples"));
        }
        if self.schedule.steps != self.denoiser.diffusion_steps {
            return Err(invalid_arg(format!(
                "schedule has {} steps but the denoiser embeds {}",
                self.schedule.steps, self.denoiser.diffusion_steps
            )));
        }
        self.schedule.build()?;
        if self.checkpoint_every == 0 {
            return Err(invalid_arg("checkpoint cadence must be at least 1"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid_arg("max_grad_norm must be positive"));
            }
        }
        self.adam.validate()
    }
}

fn validate_ladder(stages: &[ReconStage]) -> Result<()> {
    for (i, s) in stages.iter().enumerate() {
        match s.until {
            None if i + 1 != stages.len() => {
                return Err(invalid_arg("only the last reconstruction stage may be open-ended"));
            }
            Some(u) if i > 0 && stages[i - 1].until.map_or(true, |p| p >= u) => {
                return Err(invalid_arg("reconstruction stages must be strictly increasing in until"));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Learning rate at 1-based iteration `iter`: linear warm-up to the base rate,
/// then one multiplication by the decay factor per boundary passed.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let warm = if cfg.warmup == 0 { 1.0 } else { (iter as f64 / cfg.warmup as f64).min(1.0) };
    let passed = cfg.decay_boundaries.iter().filter(|&&b| iter > b).count();
    cfg.learning_rate * warm * cfg.decay_factor.powi(passed as i32)
}

/// Auxiliary reconstructions at iteration `iter`; 0 for an empty schedule or
/// past a closed final stage.
pub fn reconstructions_at(iter: u64, stages: &[ReconStage]) -> usize {
    stages.iter().find(|s| s.until.map_or(true, |u| iter <= u)).map_or(0, |s| s.count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TrainConfig {
        TrainConfig::new(DenoiserConfig::default(), 2_000_000)
    }

    #[test]
    fn learning_rate_breakpoints() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(250, &c) - 5e-5).abs() < 1e-20);
        assert_eq!(lr_at(500, &c), 1e-4);
        assert_eq!(lr_at(500_000, &c), 1e-4);
        assert!((lr_at(500_001, &c) - 5e-5).abs() < 1e-20);
        let mut two = c.clone();
        two.decay_boundaries = vec![10, 20];
        two.warmup = 0;
        assert_eq!(lr_at(1, &two), 1e-4);
        assert!((lr_at(21, &two) - 2.5e-5).abs() < 1e-20);
    }

    #[test]
    fn reconstruction_ladders() {
        let r = reposing_ladder();
        assert_eq!(reconstructions_at(10_000, &r), 30);
        assert_eq!(reconstructions_at(50_000, &r), 30);
        assert_eq!(reconstructions_at(50_001, &r), 15);
        assert_eq!(reconstructions_at(100_000, &r), 15);
        assert_eq!(reconstructions_at(500_000, &r), 5);
        assert_eq!(reconstructions_at(1_000_000, &r), 1);
        let s = static_avatar_ladder();
        assert_eq!(reconstructions_at(60_000, &s), 3);
        assert_eq!(reconstructions_at(1, &s), 15);
        assert_eq!(reconstructions_at(200_000, &s), 1);
        assert_eq!(reconstructions_at(5, &[]), 0);
        assert_eq!(reconstructions_at(11, &[ReconStage::new(Some(10), 2)]), 0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.warmup = c.iterations;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.reconstructions = vec![ReconStage::new(Some(10), 1), ReconStage::new(Some(10), 2)];
        assert!(c.validate().is_err());
        c.reconstructions = vec![ReconStage::new(None, 1), ReconStage::new(Some(10), 2)];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.schedule.steps = 10;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&cfg()).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg());
        assert!(serde_json::from_str::<TrainConfig>(&json.replace("\"seed\"", "\"sed\"")).is_err());
    }

    proptest! {
        #[test]
        fn lr_is_bounded_and_monotone_in_warmup(a in 0u64..2000, b in 0u64..2000) {
            let mut c = cfg();
            c.warmup = 1000;
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(lr_at(lo, &c) <= lr_at(hi, &c));
            prop_assert!(lr_at(hi, &c) <= c.learning_rate);
        }

        #[test]
        fn reconstructions_are_non_increasing_on_the_ladders(a in 0u64..2_000_000, b in 0u64..2_000_000) {
            let (lo, hi) = (a.min(b), a.max(b));
            for l in [reposing_ladder(), static_avatar_ladder()] {
                prop_assert!(reconstructions_at(lo, &l) >= reconstructions_at(hi, &l));
            }
        }
    }
}
