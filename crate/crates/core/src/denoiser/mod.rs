//! Conditional U-Net noise predictor with concatenation and cross-attention
//! conditioning, hand-written backward passes and a flat parameter store.

mod blocks;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod params;
mod unet;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{EpsModel, TrainingExample};
use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::triplane::stack_with_latent;

pub use params::ParamSpec;
use params::{initialize, ParamBuilder};
use unet::{UNet, UNetCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    Concat,
    CrossAttention,
    Both,
}

impl ConditioningMode {
    pub fn uses_concat(self) -> bool {
        matches!(self, ConditioningMode::Concat | ConditioningMode::Both)
    }

    pub fn uses_cross_attention(self) -> bool {
        matches!(self, ConditioningMode::CrossAttention | ConditioningMode::Both)
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditioningMode::Concat => "concat",
            ConditioningMode::CrossAttention => "cross_attention",
            ConditioningMode::Both => "both",
        })
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(ConditioningMode::Concat),
            "cross_attention" | "cross-attention" => Ok(ConditioningMode::CrossAttention),
            "both" => Ok(ConditioningMode::Both),
            _ => Err(invalid_arg(format!("unknown conditioning mode '{}'", s))),
        }
    }
}

fn default_groups() -> usize {
    8
}

/// Network shape. The latent has `6C` channels (geometry and color for each
/// of the three planes) at `resolution x resolution`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_resolutions: BTreeSet<usize>,
    pub attention_heads: usize,
    pub conditioning_mode: ConditioningMode,
    /// Triplane channels per field.
    pub channels: usize,
    pub resolution: usize,
    pub time_embed_dim: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Largest accepted diffusion step.
    pub diffusion_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_resolutions: [8, 16, 32].into_iter().collect(),
            attention_heads: 4,
            conditioning_mode: ConditioningMode::Both,
            channels: 4,
            resolution: 32,
            time_embed_dim: 128,
            groups: 8,
            diffusion_steps: 1000,
        }
    }
}

impl DenoiserConfig {
    /// 128x128 triplanes with six channels and attention at 32, 16 and 8.
    pub fn paper_scale() -> Self {
        DenoiserConfig {
            channel_multipliers: vec![1, 1, 2, 2, 4],
            channels: 6,
            resolution: 128,
            ..Self::default()
        }
    }

    /// Spatial size at each level of the downsampling path.
    pub fn level_sizes(&self) -> Vec<usize> {
        (0..self.channel_multipliers.len()).map(|l| self.resolution >> l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(invalid_arg(m));
        if self.channels == 0 || self.base_channels == 0 || self.groups == 0 {
            return bad("channels, base_channels and groups must be positive".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be non-empty and positive".into());
        }
        let levels = self.channel_multipliers.len();
        if levels > 16 || self.resolution == 0 || self.resolution % (1 << (levels - 1)) != 0 {
            return bad(format!("resolution {} is not divisible by 2^{}", self.resolution, levels - 1));
        }
        if self.base_channels % self.groups != 0 {
            return bad(format!("base_channels {} not divisible by {} groups", self.base_channels, self.groups));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and at least 2".into());
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be positive".into());
        }
        if self.attention_heads == 0 {
            return bad("attention_heads must be at least 1".into());
        }
        let sizes = self.level_sizes();
        for &r in &self.attention_resolutions {
            let Some(l) = sizes.iter().position(|&s| s == r) else {
                return bad(format!("attention resolution {} is not produced by the downsampling path {:?}", r, sizes));
            };
            let width = self.base_channels * self.channel_multipliers[l];
            if width % self.attention_heads != 0 {
                return bad(format!("{} heads do not divide attention width {}", self.attention_heads, width));
            }
        }
        if self.conditioning_mode == ConditioningMode::CrossAttention && self.attention_resolutions.is_empty() {
            return bad("cross_attention mode needs at least one attention resolution".into());
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [6 * self.channels, self.resolution, self.resolution]
    }

    pub fn condition_shape(&self) -> [usize; 4] {
        [3, 4 * self.channels, self.resolution, self.resolution]
    }

    /// Parameter manifest implied by this configuration.
    pub fn manifest(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let mut pb = ParamBuilder::default();
        UNet::build(self, &mut pb);
        Ok(pb.into_manifest().0)
    }
}

/// A model that can report gradients of a scalar loss through its output.
pub trait Differentiable {
    type Cache;

    fn num_params(&self) -> usize;

    fn forward_cached(&self, latent: &Tensor, t: usize, condition: &Tensor) -> Result<(Tensor, Self::Cache)>;

    /// Accumulate `d loss / d params` into `grads` for output cotangent `d_output`.
    fn backward(&self, cache: &Self::Cache, d_output: &Tensor, grads: &mut [f64]) -> Result<()>;
}

#[derive(Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    net: UNet,
    manifest: Vec<ParamSpec>,
    params: Vec<f64>,
}

impl fmt::Debug for DenoiserModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenoiserModel").field("config", &self.config).field("parameters", &self.params.len()).finish()
    }
}

pub struct ForwardCache {
    net: UNetCache,
}

impl DenoiserModel {
    pub fn build(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::default();
        let net = UNet::build(&config, &mut pb);
        let (manifest, inits) = pb.into_manifest();
        let params = initialize(&manifest, &inits, rng);
        Ok(DenoiserModel { config, net, manifest, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::default();
        let net = UNet::build(&config, &mut pb);
        if params.len() != pb.total() {
            return Err(shape_err(format!("expected {} parameters, got {}", pb.total(), params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        let (manifest, _) = pb.into_manifest();
        Ok(DenoiserModel { config, net, manifest, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn manifest(&self) -> &[ParamSpec] {
        &self.manifest
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.manifest.iter().find(|s| s.name == name).map(|s| &self.params[s.offset..s.offset + s.len()])
    }

    fn check_inputs(&self, latent: &Tensor, t: usize, condition: &Tensor) -> Result<()> {
        if latent.shape() != self.config.latent_shape() {
            return Err(shape_err(format!("latent {:?}, model expects {:?}", latent.shape(), self.config.latent_shape())));
        }
        if condition.shape() != self.config.condition_shape() {
            return Err(shape_err(format!(
                "condition {:?}, model expects {:?}",
                condition.shape(),
                self.config.condition_shape()
            )));
        }
        if t == 0 || t > self.config.diffusion_steps {
            return Err(invalid_arg(format!("step {} outside [1, {}]", t, self.config.diffusion_steps)));
        }
        Ok(())
    }

    pub fn forward(&self, latent: &Tensor, t: usize, condition: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(latent, t, condition)?.0)
    }

    /// Like [`Differentiable::backward`], additionally returning the gradient
    /// with respect to the noisy latent.
    pub fn backward_with_input(&self, cache: &ForwardCache, d_output: &Tensor, grads: &mut [f64]) -> Result<Tensor> {
        if grads.len() != self.params.len() {
            return Err(shape_err(format!("gradient buffer {} vs {} parameters", grads.len(), self.params.len())));
        }
        let shape = self.config.latent_shape();
        if d_output.shape() != shape {
            return Err(shape_err(format!("output cotangent {:?}, expected {:?}", d_output.shape(), shape)));
        }
        let dinput = self.net.backward(&self.params, &cache.net, d_output.data(), grads);
        if !self.config.conditioning_mode.uses_concat() {
            return Tensor::from_vec(&shape, dinput);
        }
        let c = self.config.channels;
        let hw = shape[1] * shape[2];
        let mut out = Vec::with_capacity(6 * c * hw);
        for plane in 0..3 {
            out.extend_from_slice(&dinput[plane * 6 * c * hw..][..2 * c * hw]);
        }
        Tensor::from_vec(&shape, out)
    }
}

impl Differentiable for DenoiserModel {
    type Cache = ForwardCache;

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn forward_cached(&self, latent: &Tensor, t: usize, condition: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_inputs(latent, t, condition)?;
        let stacked;
        let input = if self.config.conditioning_mode.uses_concat() {
            stacked = stack_with_latent(latent, condition)?;
            stacked.data()
        } else {
            latent.data()
        };
        let (out, net) = self.net.forward(&self.params, input, self.config.resolution, t, condition.data());
        let out = Tensor::from_vec(latent.shape(), out)?;
        if !out.all_finite() {
            return Err(Error::Numeric(format!("non-finite denoiser output at step {}", t)));
        }
        Ok((out, ForwardCache { net }))
    }

    fn backward(&self, cache: &ForwardCache, d_output: &Tensor, grads: &mut [f64]) -> Result<()> {
        self.backward_with_input(cache, d_output, grads).map(|_| ())
    }
}

impl EpsModel for DenoiserModel {
    fn predict(&self, latent: &Tensor, t: usize, condition: &Tensor) -> Result<Tensor> {
        self.forward(latent, t, condition)
    }
}

/// One element of a training batch.
#[derive(Clone, Debug)]
pub struct TrainingItem {
    pub example: TrainingExample,
    pub condition: Tensor,
}

#[derive(Clone, Debug)]
pub struct LossAndGradients {
    pub loss: f64,
    pub gradients: Vec<f64>,
}

/// Per-item loss and cotangent: `mean((eps - pred)^2)` and `d/d pred` scaled by `weight`.
pub(crate) fn item_loss(item: &TrainingItem, pred: &Tensor, weight: f64) -> Result<(f64, Tensor)> {
    let eps = &item.example.eps;
    eps.same_shape(pred)?;
    let n = eps.len() as f64;
    let mut sum = 0.0;
    let mut d = Tensor::zeros(pred.shape());
    for ((dv, &e), &p) in d.data_mut().iter_mut().zip(eps.data()).zip(pred.data()) {
        let r = p - e;
        sum += r * r;
        *dv = 2.0 * r * weight / n;
    }
    Ok((sum / n, d))
}

/// Mean squared epsilon error over the batch and all elements, with gradients
/// reduced in batch order.
pub fn loss_and_gradients<M: Differentiable>(model: &M, batch: &[TrainingItem]) -> Result<LossAndGradients> {
    if batch.is_empty() {
        return Err(invalid_arg("empty batch"));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut gradients = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for (i, item) in batch.iter().enumerate() {
        let (pred, cache) = model
            .forward_cached(&item.example.latent, item.example.t, &item.condition)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("sample {}: {}", i, m)),
                other => other,
            })?;
        let (l, d) = item_loss(item, &pred, weight)?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at sample {}", i)));
        }
        loss += l * weight;
        model.backward(&cache, &d, &mut gradients)?;
    }
    Ok(LossAndGradients { loss, gradients })
}
