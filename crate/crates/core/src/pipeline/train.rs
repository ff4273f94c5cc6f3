use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::generate::ReposeSettings;
use super::optim::Adam;
use super::{lr_at, reconstructions_at, TrainConfig};
use crate::denoiser::{DenoiserModel, Differentiable};
use crate::diffusion::{training_example, NoiseSchedule, TrainingExample};
use crate::error::{invalid_arg, invalid_data, Error, FormatError, Result};
use crate::renderer::{render_backward, render_planes, DecoderMode, FeaturePlanes, RenderConfig, View};
use crate::rng::{self, derive_seed};
use crate::skeleton::{EncodingConfig, WorldBounds};
use crate::synthetic::Dataset;
use crate::tensor::Tensor;
use crate::triplane::build_condition;

pub const STATE_FILE: &str = "state.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
const STATE_FORMAT: &str = "tridiff-train-state";
const STATE_VERSION: u32 = 1;
const INIT_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// One training target with its precomputed condition.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub character: usize,
    pub pose: usize,
    pub latent: Tensor,
    pub condition: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainingData {
    pub bounds: WorldBounds,
    pub samples: Vec<PreparedSample>,
}

impl TrainingData {
    pub fn prepare(ds: &Dataset, encoding: &EncodingConfig) -> Result<Self> {
        if ds.samples.is_empty() {
            return Err(invalid_data("dataset has no samples"));
        }
        let bounds = ds.params.bounds;
        let samples = ds
            .samples
            .iter()
            .map(|s| {
                let (c, h, w) = (s.init.channels(), s.init.height(), s.init.width());
                let maps = encoding.condition_maps(&s.skeleton, &bounds, h, w, c)?;
                Ok(PreparedSample {
                    character: s.character,
                    pose: s.pose,
                    latent: s.target.to_latent(),
                    condition: build_condition(&s.init, &maps)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingData { bounds, samples })
    }

    fn check(&self, model: &DenoiserModel) -> Result<()> {
        let cfg = model.config();
        for s in &self.samples {
            if s.latent.shape() != cfg.latent_shape() || s.condition.shape() != cfg.condition_shape() {
                return Err(invalid_data(format!(
                    "dataset sample (character {}, pose {}) has latent {:?}, the denoiser expects {:?}",
                    s.character,
                    s.pose,
                    s.latent.shape(),
                    cfg.latent_shape()
                )));
            }
        }
        Ok(())
    }
}

/// One line of the JSON-lines run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u64,
    /// Epsilon loss plus the weighted reconstruction loss.
    pub loss: f64,
    pub eps_loss: f64,
    pub recon_loss: f64,
    pub lr: f64,
    pub reconstructions: usize,
    /// Seconds since the trainer was created or resumed.
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format: String,
    pub version: u32,
    pub iteration: u64,
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: u64,
    pub log: Vec<LogEntry>,
    pub checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: DenoiserModel,
    adam: Adam,
    sched: NoiseSchedule,
    data: TrainingData,
    iteration: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: TrainingData) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, INIT_STREAM);
        let mut model = DenoiserModel::build(cfg.denoiser.clone(), &mut r)?;
        crate::denoiser::checkpoint::round_to_f32(model.params_mut());
        Self::assemble(cfg, model, None, data, 0)
    }

    fn assemble(cfg: TrainConfig, model: DenoiserModel, adam: Option<Adam>, data: TrainingData, iteration: u64) -> Result<Self> {
        data.check(&model)?;
        let adam = adam.unwrap_or_else(|| Adam::new(cfg.adam, model.num_params()));
        let sched = cfg.schedule.build()?;
        Ok(Trainer { cfg, model, adam, sched, data, iteration, started: Instant::now() })
    }

    /// Continue from a checkpoint directory written by [`Trainer::save_checkpoint`].
    /// Only the iteration budget, output location and cadence may differ from
    /// the checkpointed configuration.
    pub fn resume(cfg: TrainConfig, data: TrainingData, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let state: TrainState = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)
            .map_err(|e| FormatError::Manifest(format!("{}: {}", STATE_FILE, e)))?;
        if state.format != STATE_FORMAT {
            return Err(FormatError::Manifest(format!("not a training state: {}", state.format)).into());
        }
        if state.version != STATE_VERSION {
            return Err(FormatError::UnsupportedVersion(state.version).into());
        }
        let comparable = |c: &TrainConfig| TrainConfig {
            iterations: 0,
            output_dir: None,
            dataset: None,
            checkpoint_every: 1,
            ..c.clone()
        };
        if comparable(&state.config) != comparable(&cfg) {
            return Err(invalid_arg("checkpoint was written with a different training configuration"));
        }
        let model = DenoiserModel::load(dir)?;
        if model.config() != &cfg.denoiser {
            return Err(invalid_arg("checkpoint denoiser differs from the configuration"));
        }
        let adam = Adam::load(&dir.join(OPTIMIZER_FILE), cfg.adam, model.num_params())?;
        if adam.step != state.iteration {
            return Err(FormatError::Manifest("optimizer step does not match the iteration".into()).into());
        }
        Self::assemble(cfg, model, Some(adam), data, state.iteration)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn into_model(self) -> DenoiserModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn settings(&self) -> ReposeSettings {
        ReposeSettings { schedule: self.cfg.schedule, encoding: self.cfg.encoding.clone() }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        self.adam.save(&dir.join(OPTIMIZER_FILE))?;
        self.settings().save(dir)?;
        let state = TrainState {
            format: STATE_FORMAT.into(),
            version: STATE_VERSION,
            iteration: self.iteration,
            config: self.cfg.clone(),
        };
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }

    /// One optimizer step. On a non-finite loss the state is left untouched.
    pub fn step(&mut self) -> Result<LogEntry> {
        let it = self.iteration + 1;
        let cfg = &self.cfg;
        let mut r = rng::stream(derive_seed(cfg.seed, STEP_STREAM), it);
        let lr = lr_at(it, cfg);
        let recon = if cfg.recon_weight > 0.0 { reconstructions_at(it, &cfg.reconstructions) } else { 0 };
        let batch = cfg.batch_size;
        let n = self.data.samples.len();
        let picks: Vec<usize> = (0..batch).map(|_| r.gen_range(0..n)).collect();
        let examples: Vec<TrainingExample> =
            picks.iter().map(|&i| training_example(&self.data.samples[i].latent, &self.sched, &mut r)).collect();
        let views: Vec<View> = (0..recon).map(|_| random_view(&mut r)).collect();

        let mut grads = vec![0.0; self.model.num_params()];
        let (mut eps_loss, mut recon_loss) = (0.0, 0.0);
        for (b, (ex, &pick)) in examples.iter().zip(&picks).enumerate() {
            let sample = &self.data.samples[pick];
            let (pred, cache) = self.model.forward_cached(&ex.latent, ex.t, &sample.condition).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("iteration {}, sample {}: {}", it, b, m)),
                other => other,
            })?;
            let len = pred.len() as f64;
            let mut d = Tensor::zeros(pred.shape());
            let mut sum = 0.0;
            for ((dv, &e), &p) in d.data_mut().iter_mut().zip(ex.eps.data()).zip(pred.data()) {
                let res = p - e;
                sum += res * res;
                *dv = 2.0 * res / (len * batch as f64);
            }
            eps_loss += sum / len / batch as f64;
            for view in views.iter().skip(b).step_by(batch) {
                let weight = cfg.recon_weight / recon as f64;
                recon_loss += self.reconstruction_term(ex, &pred, &sample.latent, *view, weight, &mut d)? / recon as f64;
            }
            self.model.backward(&cache, &d, &mut grads)?;
        }
        let loss = eps_loss + cfg.recon_weight * recon_loss;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss at iteration {}", it)));
        }
        if let Some(clip) = cfg.max_grad_norm {
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                grads.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        self.adam.update(self.model.params_mut(), &grads, lr)?;
        self.iteration = it;
        Ok(LogEntry {
            iteration: it,
            loss,
            eps_loss,
            recon_loss,
            lr,
            reconstructions: recon,
            wall_time: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Weighted image loss between renders of the implied clean estimate and
    /// of the target, scaled by `alpha_bar(t)` so that the cotangent on the
    /// prediction stays bounded at high noise. Accumulates into `d_pred`.
    fn reconstruction_term(&self, ex: &TrainingExample, pred: &Tensor, target: &Tensor, view: View, weight: f64, d_pred: &mut Tensor) -> Result<f64> {
        let ab = self.sched.alpha_bar(ex.t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut inside = vec![false; pred.len()];
        let est: Vec<f64> = ex
            .latent
            .data()
            .iter()
            .zip(pred.data())
            .zip(inside.iter_mut())
            .map(|((&x, &e), m)| {
                let v = (x - sn * e) / sa;
                *m = v.abs() < 1.0;
                v.clamp(-1.0, 1.0)
            })
            .collect();
        let est = Tensor::from_vec(pred.shape(), est)?;
        let rr = &self.cfg.recon_render;
        let rcfg = RenderConfig {
            size: rr.size,
            view,
            samples: rr.samples,
            density_scale: rr.density_scale,
            decoder: DecoderMode::Analytic,
            analytic: rr.decoder,
        };
        let gt = render_planes(&FeaturePlanes::from_latent(target, self.data.bounds)?, &rcfg, None)?;
        let planes = FeaturePlanes::from_latent(&est, self.data.bounds)?;
        let img = render_planes(&planes, &rcfg, None)?;
        let m = (img.rgb.len() + img.alpha.len()) as f64;
        let diff_rgb: Vec<f64> = img.rgb.iter().zip(&gt.rgb).map(|(a, b)| a - b).collect();
        let diff_a: Vec<f64> = img.alpha.iter().zip(&gt.alpha).map(|(a, b)| a - b).collect();
        let term = ab * diff_rgb.iter().chain(&diff_a).map(|v| v * v).sum::<f64>() / m;
        let scale = weight * ab * 2.0 / m;
        let d_rgb: Vec<f64> = diff_rgb.iter().map(|v| scale * v).collect();
        let d_alpha: Vec<f64> = diff_a.iter().map(|v| scale * v).collect();
        let (_, gg, gc) = render_backward(&planes, &rcfg, &d_rgb, &d_alpha)?;
        let g = planes.to_latent_layout(&gg, &gc);
        for ((dv, gv), &m) in d_pred.data_mut().iter_mut().zip(g).zip(&inside) {
            if m {
                *dv -= gv * sn / sa;
            }
        }
        Ok(term)
    }

    /// Step until `cfg.iterations`, logging each entry and writing checkpoints
    /// under `out` when given. A non-finite loss dumps the current state to
    /// `out/abort_<iteration>` before returning the error.
    pub fn run(&mut self, out: Option<&Path>, mut on_entry: impl FnMut(&LogEntry)) -> Result<TrainSummary> {
        let mut log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(fs::OpenOptions::new().create(true).append(true).open(dir.join("run.jsonl"))?)
            }
            None => None,
        };
        let mut log = Vec::new();
        let mut checkpoint = None;
        while self.iteration < self.cfg.iterations {
            let entry = match self.step() {
                Ok(e) => e,
                Err(e @ Error::Numeric(_)) => {
                    if let Some(dir) = out {
                        let dump = dir.join(format!("abort_{:08}", self.iteration + 1));
                        self.save_checkpoint(&dump)?;
                        return Err(Error::Numeric(format!("{} (state saved to {})", e, dump.display())));
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
            on_entry(&entry);
            log.push(entry);
            let done = self.iteration == self.cfg.iterations;
            if let Some(dir) = out {
                if done || self.iteration % self.cfg.checkpoint_every == 0 {
                    let path = dir.join(format!("ckpt_{:08}", self.iteration));
                    self.save_checkpoint(&path)?;
                    checkpoint = Some(path);
                }
            }
        }
        Ok(TrainSummary { iterations: self.iteration, log, checkpoint })
    }
}

fn random_view(r: &mut rng::Rng) -> View {
    if r.gen_bool(0.5) {
        View::AXES[r.gen_range(0..6)]
    } else {
        View::Orbit { azimuth: r.gen_range(0.0..360.0), elevation: r.gen_range(-60.0..60.0) }
    }
}

/// Train from a configuration file's dataset, optionally resuming.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>, on_entry: impl FnMut(&LogEntry)) -> Result<TrainSummary> {
    let path = cfg.dataset.as_ref().ok_or_else(|| invalid_arg("the configuration names no dataset"))?;
    let ds = Dataset::load(path)?;
    let p = &ds.params;
    let d = &cfg.denoiser;
    if p.channels != d.channels || p.height != d.resolution || p.width != d.resolution {
        return Err(invalid_data(format!(
            "dataset has C = {} at {}x{}, the denoiser expects C = {} at {}x{}",
            p.channels, p.height, p.width, d.channels, d.resolution, d.resolution
        )));
    }
    let data = TrainingData::prepare(&ds, &cfg.encoding)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(cfg.clone(), data, dir)?,
        None => Trainer::new(cfg.clone(), data)?,
    };
    trainer.run(cfg.output_dir.as_deref(), on_entry)
}

/// Model and sampling settings from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(DenoiserModel, ReposeSettings)> {
    let model = DenoiserModel::load(dir)?;
    let settings = ReposeSettings::load_or_default(dir, model.config())?;
    Ok((model, settings))
}
