//! DDPM noise schedule, forward process and ancestral sampler.
//!
//! Steps are integers `1..=T`. `gamma(t)` is the per-step noise variance and
//! `alpha_bar(t) = prod_{i <= t} (1 - gamma(i))`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::rng::{fill_normal, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub gamma_start: f64,
    pub gamma_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, gamma_start: 1e-4, gamma_end: 0.02 }
    }
}

impl ScheduleConfig {
    /// Linear endpoints rescaled by `1000 / steps`, keeping the terminal
    /// signal level of the 1000-step default roughly fixed for short chains.
    pub fn scaled_linear(steps: usize) -> Self {
        let s = 1000.0 / steps as f64;
        ScheduleConfig { steps, gamma_start: 1e-4 * s, gamma_end: (0.02 * s).min(0.999) }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.gamma_start, self.gamma_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    gamma: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, gamma_start: f64, gamma_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid_arg("schedule needs at least one step"));
        }
        if !(gamma_start > 0.0 && gamma_start <= gamma_end && gamma_end < 1.0) {
            return Err(invalid_arg(format!(
                "need 0 < gamma_start <= gamma_end < 1, got ({}, {})",
                gamma_start, gamma_end
            )));
        }
        let gamma = (0..steps)
            .map(|i| {
                if steps == 1 {
                    gamma_start
                } else {
                    gamma_start + (gamma_end - gamma_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        NoiseSchedule::from_gammas(gamma)
    }

    pub fn from_gammas(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(invalid_arg("schedule needs at least one step"));
        }
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(invalid_arg(format!("gamma {} outside (0, 1)", g)));
        }
        let mut alpha_bar = Vec::with_capacity(gamma.len());
        let mut acc = 1.0;
        for g in &gamma {
            acc *= 1.0 - g;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { gamma, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid_arg(format!("step {} outside 1..={}", t, self.steps())));
        }
        Ok(())
    }
}

/// One step of the forward chain with an explicit noise draw:
/// `sqrt(1 - gamma) * prev + sqrt(gamma) * z`.
pub fn forward_step_with(prev: &Tensor, gamma: f64, z: &Tensor) -> Result<Tensor> {
    prev.lin_comb((1.0 - gamma).sqrt(), z, gamma.sqrt())
}

pub fn forward_step(prev: &Tensor, t: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor> {
    sched.check_step(t)?;
    let z = Tensor::randn(prev.shape(), rng);
    forward_step_with(prev, sched.gamma(t), &z)
}

/// Closed-form sample of step `t`: `sqrt(ab) * f0 + sqrt(1 - ab) * eps`.
pub fn forward_marginal(f0: &Tensor, t: usize, sched: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    f0.lin_comb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// One noisy regression target for the epsilon objective.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub latent: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

pub fn training_example(f0: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> TrainingExample {
    let t = rng.gen_range(1..=sched.steps());
    let eps = Tensor::randn(f0.shape(), rng);
    let latent = forward_marginal(f0, t, sched, &eps).expect("shapes agree");
    TrainingExample { latent, t, eps }
}

/// Mean squared error between the injected noise and a prediction.
pub fn epsilon_loss(eps: &Tensor, predicted: &Tensor) -> Result<f64> {
    eps.same_shape(predicted)?;
    let n = eps.len() as f64;
    Ok(eps.data().iter().zip(predicted.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// A noise predictor `eps(latent, t, condition)`.
pub trait EpsModel {
    fn predict(&self, latent: &Tensor, t: usize, condition: &Tensor) -> Result<Tensor>;
}

impl<F> EpsModel for F
where
    F: Fn(&Tensor, usize, &Tensor) -> Result<Tensor>,
{
    fn predict(&self, latent: &Tensor, t: usize, condition: &Tensor) -> Result<Tensor> {
        self(latent, t, condition)
    }
}

/// Ancestral DDPM sampling from `N(0, I)` at step T down to step 1, with
/// posterior variance `gamma_t` and no noise on the last step.
pub fn ancestral_sample(
    model: &impl EpsModel,
    condition: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    shape: &[usize],
) -> Result<Tensor> {
    let mut x = Tensor::randn(shape, rng);
    let mut z = Tensor::zeros(shape);
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict(&x, t, condition)?;
        x.same_shape(&eps)?;
        let g = sched.gamma(t);
        let inv = 1.0 / (1.0 - g).sqrt();
        let coef = g / (1.0 - sched.alpha_bar(t)).sqrt();
        if t > 1 {
            fill_normal(rng, z.data_mut());
        }
        let sigma = if t > 1 { g.sqrt() } else { 0.0 };
        for ((xv, &e), &n) in x.data_mut().iter_mut().zip(eps.data()).zip(z.data()) {
            *xv = inv * (*xv - coef * e) + sigma * n;
        }
        if !x.all_finite() {
            return Err(Error::Numeric(format!(
                "sampler diverged at step {} (max |eps| = {:e})",
                t,
                eps.max_abs()
            )));
        }
    }
    Ok(x)
}
