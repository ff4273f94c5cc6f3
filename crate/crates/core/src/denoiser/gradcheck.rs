//! Finite-difference verification of the hand-written backward passes.
//!
//! For a block `f(p, x)` and a random linear read-out `w`, the analytic
//! directional derivative `grad_p . dp + grad_x . dx` of `w . f` is compared
//! against a central difference along `(dp, dx)`.

use std::fmt;

use super::blocks::{condition_tokens, AttnBlock, Conv, GroupNorm, ResBlock, TimeMlp};
use super::params::{initialize, ParamBuilder};
use super::{ConditioningMode, DenoiserConfig, DenoiserModel, Differentiable};
use crate::error::Result;
use crate::rng::{self, normal, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Conv,
    StridedConv,
    GroupNorm,
    TimeMlp,
    ResBlock,
    SelfAttention,
    CrossAttention,
    UNet,
}

impl BlockKind {
    pub const ALL: [BlockKind; 8] = [
        BlockKind::Conv,
        BlockKind::StridedConv,
        BlockKind::GroupNorm,
        BlockKind::TimeMlp,
        BlockKind::ResBlock,
        BlockKind::SelfAttention,
        BlockKind::CrossAttention,
        BlockKind::UNet,
    ];
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub kind: BlockKind,
    pub directions: usize,
    pub max_rel_error: f64,
}

const STEP: f64 = 1e-5;

type Eval<'a> = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + 'a>;
type Grad<'a> = Box<dyn Fn(&[f64], &[f64], &[f64]) -> (Vec<f64>, Vec<f64>) + 'a>;

fn randn(n: usize, r: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| normal(r)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: &[f64], h: f64, d: &[f64]) -> Vec<f64> {
    a.iter().zip(d).map(|(x, y)| x + h * y).collect()
}

fn run(p: &[f64], x: &[f64], eval: Eval, grad: Grad, directions: usize, r: &mut Rng) -> f64 {
    let y = eval(p, x);
    let w = randn(y.len(), r);
    let (gp, gx) = grad(p, x, &w);
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let dp = randn(p.len(), r);
        let dx = randn(x.len(), r);
        let f = |h: f64| dot(&w, &eval(&axpy(p, h, &dp), &axpy(x, h, &dx)));
        // fourth-order central difference
        let fd = (8.0 * (f(STEP) - f(-STEP)) - (f(2.0 * STEP) - f(-2.0 * STEP))) / (12.0 * STEP);
        let an = dot(&gp, &dp) + dot(&gx, &dx);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Random parameters around the block's initialization so that zero- and
/// one-initialized entries also carry signal.
fn perturbed(pb: ParamBuilder, r: &mut Rng) -> Vec<f64> {
    let (specs, inits) = pb.into_manifest();
    let mut p = initialize(&specs, &inits, r);
    p.iter_mut().for_each(|v| *v += 0.2 * normal(r));
    p
}

pub fn check_block(kind: BlockKind, directions: usize, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng::seeded(seed);
    let r = &mut r;
    let err = match kind {
        BlockKind::Conv | BlockKind::StridedConv => {
            let stride = if kind == BlockKind::Conv { 1 } else { 2 };
            let mut pb = ParamBuilder::default();
            let conv = Conv::new(&mut pb, "conv", 3, 4, 3, stride, false);
            let p = perturbed(pb, r);
            let x = randn(3 * 8 * 8, r);
            let c = &conv;
            run(
                &p,
                &x,
                Box::new(move |p, x| c.forward(p, x, 8, 8).0),
                Box::new(move |p, x, w| {
                    let (_, cache) = c.forward(p, x, 8, 8);
                    let mut g = vec![0.0; p.len()];
                    let dx = c.backward(p, &cache, w, &mut g);
                    (g, dx)
                }),
                directions,
                r,
            )
        }
        BlockKind::GroupNorm => {
            let mut pb = ParamBuilder::default();
            let gn = GroupNorm::new(&mut pb, "norm", 8, 4);
            let p = perturbed(pb, r);
            let x = randn(8 * 16, r);
            let n = &gn;
            run(
                &p,
                &x,
                Box::new(move |p, x| n.forward(p, x).0),
                Box::new(move |p, x, w| {
                    let (_, cache) = n.forward(p, x);
                    let mut g = vec![0.0; p.len()];
                    let dx = n.backward(p, &cache, w, &mut g);
                    (g, dx)
                }),
                directions,
                r,
            )
        }
        BlockKind::TimeMlp => {
            let mut pb = ParamBuilder::default();
            let mlp = TimeMlp::new(&mut pb, "time", 16);
            let p = perturbed(pb, r);
            let m = &mlp;
            run(
                &p,
                &[],
                Box::new(move |p, _| m.forward(p, 37.0).0),
                Box::new(move |p, _, w| {
                    let (_, cache) = m.forward(p, 37.0);
                    let mut g = vec![0.0; p.len()];
                    m.backward(p, &cache, w, &mut g);
                    (g, Vec::new())
                }),
                directions,
                r,
            )
        }
        BlockKind::ResBlock => {
            let mut pb = ParamBuilder::default();
            let block = ResBlock::new(&mut pb, "res", 8, 16, 6, 4);
            let np = pb.total();
            let p = perturbed(pb, r);
            // the activated time embedding is treated as part of the input
            let x = randn(8 * 6 * 6 + 6, r);
            let b = &block;
            let split = 8 * 36;
            run(
                &p,
                &x,
                Box::new(move |p, x| b.forward(p, &x[..split], 6, 6, &x[split..]).0),
                Box::new(move |p, x, w| {
                    let (_, cache) = b.forward(p, &x[..split], 6, 6, &x[split..]);
                    let mut g = vec![0.0; np];
                    let mut dt = vec![0.0; 6];
                    let mut dx = b.backward(p, &cache, w, &mut g, &x[split..], &mut dt);
                    dx.extend_from_slice(&dt);
                    (g, dx)
                }),
                directions,
                r,
            )
        }
        BlockKind::SelfAttention | BlockKind::CrossAttention => {
            let cross = kind == BlockKind::CrossAttention;
            let (ch, rr, k) = (8, 4, 4);
            let mut pb = ParamBuilder::default();
            let block = AttnBlock::new(&mut pb, "attn", ch, 2, 4, cross.then_some(k));
            let p = perturbed(pb, r);
            let x = randn(ch * rr * rr, r);
            let cond_map = randn(3 * k * 8 * 8, r);
            let tokens = cross.then(|| condition_tokens(&cond_map, k, 8, 8, rr));
            assert!(tokens.as_ref().map_or(true, |t| t.len() == 3 * rr * rr * (k + super::blocks::KEY_POS)));
            let b = &block;
            let tk = tokens.as_deref();
            run(
                &p,
                &x,
                Box::new(move |p, x| b.forward(p, x, rr, tk).0),
                Box::new(move |p, x, w| {
                    let (_, cache) = b.forward(p, x, rr, tk);
                    let mut g = vec![0.0; p.len()];
                    let dx = b.backward(p, &cache, tk, w, &mut g);
                    (g, dx)
                }),
                directions,
                r,
            )
        }
        BlockKind::UNet => {
            let cfg = tiny_unet_config();
            let mut model = DenoiserModel::build(cfg.clone(), r)?;
            for v in model.params_mut() {
                *v += 0.1 * normal(r);
            }
            let cond = Tensor::randn(&cfg.condition_shape(), r);
            let shape = cfg.latent_shape();
            let latent = randn(shape.iter().product(), r);
            let p = model.params().to_vec();
            let m = &model;
            let cd = &cond;
            let eval = move |p: &[f64], x: &[f64]| {
                let tmp = DenoiserModel::from_params(cfg.clone(), p.to_vec()).expect("valid");
                let xt = Tensor::from_vec(&shape, x.to_vec()).expect("shape");
                tmp.forward(&xt, 23, cd).expect("forward").into_vec()
            };
            run(
                &p,
                &latent,
                Box::new(eval),
                Box::new(move |_p, x, w| {
                    let xt = Tensor::from_vec(&shape, x.to_vec()).expect("shape");
                    let (_, cache) = m.forward_cached(&xt, 23, cd).expect("forward");
                    let mut g = vec![0.0; m.num_params()];
                    let dy = Tensor::from_vec(&shape, w.to_vec()).expect("shape");
                    let dx = m.backward_with_input(&cache, &dy, &mut g).expect("backward");
                    (g, dx.into_vec())
                }),
                directions,
                r,
            )
        }
    };
    Ok(GradCheckReport { kind, directions, max_rel_error: err })
}

/// Two-level 16x16 network with base width 8 used by the composed check.
pub fn tiny_unet_config() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        attention_resolutions: [8, 16].into_iter().collect(),
        attention_heads: 2,
        conditioning_mode: ConditioningMode::Both,
        channels: 2,
        resolution: 16,
        time_embed_dim: 16,
        groups: 8,
        diffusion_steps: 100,
    }
}
