use super::blocks::{condition_tokens, AttnBlock, AttnBlockCache, Conv, ConvCache, GroupNorm, ResBlock, ResCache, TimeCache, TimeMlp};
use super::ops::{self, NormCache};
use super::params::ParamBuilder;
use super::{ConditioningMode, DenoiserConfig};

#[derive(Clone)]
struct DownLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    down: Option<Conv>,
    size: usize,
}

#[derive(Clone)]
struct UpLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    up: Option<Conv>,
    size: usize,
}

/// Layer layout of the conditional U-Net; parameters live in a separate flat vector.
#[derive(Clone)]
pub struct UNet {
    in_channels: usize,
    out_channels: usize,
    cond_channels: usize,
    mode: ConditioningMode,
    time: TimeMlp,
    conv_in: Conv,
    down: Vec<DownLevel>,
    mid: ResBlock,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

pub struct UNetCache {
    t: TimeCache,
    temb_raw: Vec<f64>,
    temb: Vec<f64>,
    tokens: Vec<(usize, Vec<f64>)>,
    conv_in: ConvCache,
    down: Vec<(ResCache, Option<AttnBlockCache>, Option<ConvCache>)>,
    mid: ResCache,
    up: Vec<(ResCache, Option<AttnBlockCache>, Option<(usize, ConvCache)>)>,
    norm_out: NormCache,
    pre_out: Vec<f64>,
    conv_out: ConvCache,
    skip_channels: Vec<usize>,
}

impl UNet {
    pub fn build(cfg: &DenoiserConfig, pb: &mut ParamBuilder) -> Self {
        let c = cfg.channels;
        let g = cfg.groups;
        let temb = cfg.time_embed_dim;
        let latent = 6 * c;
        let cond_channels = 4 * c;
        let in_channels = if cfg.conditioning_mode.uses_concat() { 3 * (2 * c + cond_channels) } else { latent };
        let cross = cfg.conditioning_mode.uses_cross_attention().then_some(cond_channels);
        let widths: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * cfg.base_channels).collect();
        let levels = widths.len();

        let time = TimeMlp::new(pb, "time_mlp", temb);
        let conv_in = Conv::new(pb, "conv_in", in_channels, cfg.base_channels, 3, 1, false);
        let mut down = Vec::with_capacity(levels);
        let mut ch = cfg.base_channels;
        for (l, &w) in widths.iter().enumerate() {
            let size = cfg.resolution >> l;
            pb.push(format!("down.{}", l));
            let res = ResBlock::new(pb, "res", ch, w, temb, g);
            let attn = cfg.attention_resolutions.contains(&size).then(|| AttnBlock::new(pb, "attn", w, cfg.attention_heads, g, cross));
            let dn = (l + 1 < levels).then(|| Conv::new(pb, "downsample", w, w, 3, 2, false));
            pb.pop();
            ch = w;
            down.push(DownLevel { res, attn, down: dn, size });
        }
        let mid = ResBlock::new(pb, "mid", ch, ch, temb, g);
        let mut up = Vec::with_capacity(levels);
        for (l, &w) in widths.iter().enumerate().rev() {
            let size = cfg.resolution >> l;
            pb.push(format!("up.{}", l));
            let res = ResBlock::new(pb, "res", ch + w, w, temb, g);
            let attn = cfg.attention_resolutions.contains(&size).then(|| AttnBlock::new(pb, "attn", w, cfg.attention_heads, g, cross));
            let upc = (l > 0).then(|| Conv::new(pb, "upsample", w, w, 3, 1, false));
            pb.pop();
            ch = w;
            up.push(UpLevel { res, attn, up: upc, size });
        }
        let norm_out = GroupNorm::new(pb, "norm_out", ch, g);
        // the output layer also reads the raw input, so eps ~ x at large t is a linear map
        let conv_out = Conv::new(pb, "conv_out", ch + in_channels, latent, 3, 1, true);
        UNet { in_channels, out_channels: latent, cond_channels, mode: cfg.conditioning_mode, time, conv_in, down, mid, up, norm_out, conv_out }
    }

    /// `input` is the network input (`[in_channels, H, W]`), `cond` the raw
    /// `[3, 4C, H, W]` condition used for cross-attention tokens.
    pub fn forward(&self, p: &[f64], input: &[f64], size: usize, t: usize, cond: &[f64]) -> (Vec<f64>, UNetCache) {
        debug_assert_eq!(input.len(), self.in_channels * size * size);
        let (temb_raw, tc) = self.time.forward(p, t as f64);
        let temb = ops::silu(&temb_raw);
        let mut tokens = Vec::new();
        if self.mode.uses_cross_attention() {
            for lvl in &self.down {
                if lvl.attn.is_some() {
                    tokens.push((lvl.size, condition_tokens(cond, self.cond_channels, size, size, lvl.size)));
                }
            }
        }
        let tok = |r: usize| tokens.iter().find(|(s, _)| *s == r).map(|(_, v)| v.as_slice());

        let (mut h, conv_in) = self.conv_in.forward(p, input, size, size);
        let mut skips: Vec<Vec<f64>> = Vec::new();
        let mut down_c = Vec::new();
        for lvl in &self.down {
            let s = lvl.size;
            let (x, rc) = lvl.res.forward(p, &h, s, s, &temb);
            h = x;
            let ac = lvl.attn.as_ref().map(|a| {
                let (x, c) = a.forward(p, &h, s, if a.has_cross() { tok(s) } else { None });
                h = x;
                c
            });
            skips.push(h.clone());
            let dc = lvl.down.as_ref().map(|d| {
                let (x, c) = d.forward(p, &h, s, s);
                h = x;
                c
            });
            down_c.push((rc, ac, dc));
        }
        let s_mid = self.down.last().map_or(size, |l| l.size);
        let (x, mid) = self.mid.forward(p, &h, s_mid, s_mid, &temb);
        h = x;
        let mut up_c = Vec::new();
        let mut skip_channels = Vec::new();
        for lvl in &self.up {
            let s = lvl.size;
            let skip = skips.pop().expect("one skip per level");
            skip_channels.push(skip.len() / (s * s));
            h.extend_from_slice(&skip);
            let (x, rc) = lvl.res.forward(p, &h, s, s, &temb);
            h = x;
            let ac = lvl.attn.as_ref().map(|a| {
                let (x, c) = a.forward(p, &h, s, if a.has_cross() { tok(s) } else { None });
                h = x;
                c
            });
            let uc = lvl.up.as_ref().map(|u| {
                let ch = h.len() / (s * s);
                let upsampled = ops::upsample2(&h, ch, s, s);
                let (x, c) = u.forward(p, &upsampled, 2 * s, 2 * s);
                h = x;
                (ch, c)
            });
            up_c.push((rc, ac, uc));
        }
        let (n, norm_out) = self.norm_out.forward(p, &h);
        let mut a = ops::silu(&n);
        a.extend_from_slice(input);
        let (out, conv_out) = self.conv_out.forward(p, &a, size, size);
        debug_assert_eq!(out.len(), self.out_channels * size * size);
        let cache = UNetCache { t: tc, temb_raw, temb, tokens, conv_in, down: down_c, mid, up: up_c, norm_out, pre_out: n, conv_out, skip_channels };
        (out, cache)
    }

    /// Accumulates parameter gradients for output cotangent `dy` and returns
    /// the gradient with respect to the network input.
    pub fn backward(&self, p: &[f64], cache: &UNetCache, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let tok = |r: usize| cache.tokens.iter().find(|(s, _)| *s == r).map(|(_, v)| v.as_slice());
        let mut dtemb = vec![0.0; cache.temb.len()];
        let mut da = self.conv_out.backward(p, &cache.conv_out, dy, g);
        let d_skip_in = da.split_off(cache.pre_out.len());
        let mut dn = vec![0.0; da.len()];
        ops::silu_backward(&cache.pre_out, &da, &mut dn);
        let mut dh = self.norm_out.backward(p, &cache.norm_out, &dn, g);
        let mut dskips: Vec<Vec<f64>> = Vec::new();
        for ((lvl, (rc, ac, uc)), &skip_ch) in self.up.iter().zip(&cache.up).zip(&cache.skip_channels).rev() {
            let s = lvl.size;
            if let (Some(u), Some((ch, c))) = (&lvl.up, uc) {
                let dup = u.backward(p, c, &dh, g);
                dh = ops::upsample2_backward(&dup, *ch, s, s);
            }
            if let (Some(a), Some(c)) = (&lvl.attn, ac) {
                dh = a.backward(p, c, if a.has_cross() { tok(s) } else { None }, &dh, g);
            }
            let mut dcat = lvl.res.backward(p, rc, &dh, g, &cache.temb, &mut dtemb);
            let split = dcat.len() - skip_ch * s * s;
            dskips.push(dcat.split_off(split));
            dh = dcat;
        }
        dh = self.mid.backward(p, &cache.mid, &dh, g, &cache.temb, &mut dtemb);
        for (lvl, (rc, ac, dc)) in self.down.iter().zip(&cache.down).rev() {
            let s = lvl.size;
            if let (Some(d), Some(c)) = (&lvl.down, dc) {
                dh = d.backward(p, c, &dh, g);
            }
            let ds = dskips.pop().expect("one skip per level");
            dh.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
            if let (Some(a), Some(c)) = (&lvl.attn, ac) {
                dh = a.backward(p, c, if a.has_cross() { tok(s) } else { None }, &dh, g);
            }
            dh = lvl.res.backward(p, rc, &dh, g, &cache.temb, &mut dtemb);
        }
        let mut dinput = self.conv_in.backward(p, &cache.conv_in, &dh, g);
        dinput.iter_mut().zip(&d_skip_in).for_each(|(a, b)| *a += b);
        let mut draw = vec![0.0; dtemb.len()];
        ops::silu_backward(&cache.temb_raw, &dtemb, &mut draw);
        self.time.backward(p, &cache.t, &draw, g);
        dinput
    }
}
