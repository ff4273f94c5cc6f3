//! Parameterized layers with explicit caches for the backward pass.

use super::ops::{self, ConvGeom, NormCache};
use super::params::{Init, ParamBuilder, ParamRef};

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    w: ParamRef,
    b: ParamRef,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_f: usize, out_f: usize, zero: bool) -> Self {
        pb.push(name);
        let w = pb.add("weight", &[out_f, in_f], if zero { Init::Zeros } else { Init::FanIn(in_f) });
        let b = pb.add("bias", &[out_f], Init::Zeros);
        pb.pop();
        Linear { in_f, out_f, w, b }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        ops::linear_forward(x, rows, self.in_f, self.out_f, self.w.get(p), self.b.get(p))
    }

    pub fn backward(&self, p: &[f64], x: &[f64], rows: usize, dy: &[f64], g: &mut [f64], need_dx: bool) -> Option<Vec<f64>> {
        let (gw, gb) = split_pair(g, self.w, self.b);
        ops::linear_backward(x, rows, self.in_f, self.out_f, self.w.get(p), dy, gw, gb, need_dx)
    }
}

/// Two disjoint parameter slices; `a` must precede `b`.
fn split_pair(g: &mut [f64], a: ParamRef, b: ParamRef) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.offset + a.len <= b.offset);
    let (lo, hi) = g.split_at_mut(b.offset);
    (&mut lo[a.offset..a.offset + a.len], &mut hi[..b.len])
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    kernel: usize,
    stride: usize,
    w: ParamRef,
    b: ParamRef,
}

pub struct ConvCache {
    geom: ConvGeom,
    x: Vec<f64>,
    cols: Vec<f64>,
}

impl Conv {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, zero: bool) -> Self {
        pb.push(name);
        let fan_in = in_ch * kernel * kernel;
        let w = pb.add("weight", &[out_ch, in_ch, kernel, kernel], if zero { Init::Zeros } else { Init::FanIn(fan_in) });
        let b = pb.add("bias", &[out_ch], Init::Zeros);
        pb.pop();
        Conv { in_ch, out_ch, kernel, stride, w, b }
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom { in_ch: self.in_ch, out_ch: self.out_ch, kernel: self.kernel, stride: self.stride, pad: self.kernel / 2, height: h, width: w }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], h: usize, w: usize) -> (Vec<f64>, ConvCache) {
        let geom = self.geom(h, w);
        let (y, cols) = ops::conv_forward(&geom, self.w.get(p), self.b.get(p), x);
        (y, ConvCache { geom, x: x.to_vec(), cols })
    }

    pub fn backward(&self, p: &[f64], cache: &ConvCache, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let (gw, gb) = split_pair(g, self.w, self.b);
        ops::conv_backward(&cache.geom, self.w.get(p), &cache.x, &cache.cols, dy, gw, gb)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub channels: usize,
    groups: usize,
    gamma: ParamRef,
    beta: ParamRef,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Self {
        pb.push(name);
        let gamma = pb.add("weight", &[channels], Init::Ones);
        let beta = pb.add("bias", &[channels], Init::Zeros);
        pb.pop();
        GroupNorm { channels, groups, gamma, beta }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, NormCache) {
        ops::group_norm_forward(x, self.channels, self.groups, self.gamma.get(p), self.beta.get(p))
    }

    pub fn backward(&self, p: &[f64], cache: &NormCache, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let gamma = self.gamma.get(p);
        let (gg, gb) = split_pair(g, self.gamma, self.beta);
        ops::group_norm_backward(cache, self.channels, self.groups, gamma, dy, gg, gb)
    }
}

/// Sinusoidal embedding of the step index followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeMlp {
    pub dim: usize,
    l1: Linear,
    l2: Linear,
}

pub struct TimeCache {
    emb: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
}

pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t * freq).sin();
        out[half + k] = (t * freq).cos();
    }
    out
}

impl TimeMlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        pb.push(name);
        let l1 = Linear::new(pb, "fc1", dim, dim, false);
        let l2 = Linear::new(pb, "fc2", dim, dim, false);
        pb.pop();
        TimeMlp { dim, l1, l2 }
    }

    pub fn forward(&self, p: &[f64], t: f64) -> (Vec<f64>, TimeCache) {
        let emb = sinusoidal_embedding(t, self.dim);
        let h1 = self.l1.forward(p, &emb, 1);
        let a1 = ops::silu(&h1);
        let out = self.l2.forward(p, &a1, 1);
        (out, TimeCache { emb, h1, a1 })
    }

    pub fn backward(&self, p: &[f64], cache: &TimeCache, dy: &[f64], g: &mut [f64]) {
        let da1 = self.l2.backward(p, &cache.a1, 1, dy, g, true).expect("requested");
        let mut dh1 = vec![0.0; da1.len()];
        ops::silu_backward(&cache.h1, &da1, &mut dh1);
        self.l1.backward(p, &cache.emb, 1, &dh1, g, false);
    }
}

/// GroupNorm, SiLU, 3x3 conv, time bias, GroupNorm, SiLU, 3x3 conv, plus a
/// (projected) residual.
#[derive(Clone, Debug)]
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv,
    time: Linear,
    gn2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

pub struct ResCache {
    hw: (usize, usize),
    gn1: NormCache,
    a1: Vec<f64>,
    conv1: ConvCache,
    gn2: NormCache,
    a2: Vec<f64>,
    conv2: ConvCache,
    skip: Option<ConvCache>,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize, temb: usize, groups: usize) -> Self {
        pb.push(name);
        let gn1 = GroupNorm::new(pb, "norm1", in_ch, groups);
        let conv1 = Conv::new(pb, "conv1", in_ch, out_ch, 3, 1, false);
        let time = Linear::new(pb, "time", temb, out_ch, false);
        let gn2 = GroupNorm::new(pb, "norm2", out_ch, groups);
        let conv2 = Conv::new(pb, "conv2", out_ch, out_ch, 3, 1, false);
        let skip = (in_ch != out_ch).then(|| Conv::new(pb, "skip", in_ch, out_ch, 1, 1, false));
        pb.pop();
        ResBlock { gn1, conv1, time, gn2, conv2, skip }
    }

    /// `temb` is the activated time embedding shared by all blocks.
    pub fn forward(&self, p: &[f64], x: &[f64], h: usize, w: usize, temb: &[f64]) -> (Vec<f64>, ResCache) {
        let hw = h * w;
        let (n1, gn1) = self.gn1.forward(p, x);
        let s1 = ops::silu(&n1);
        let (mut c1, conv1) = self.conv1.forward(p, &s1, h, w);
        let tb = self.time.forward(p, temb, 1);
        for (row, b) in c1.chunks_exact_mut(hw).zip(&tb) {
            row.iter_mut().for_each(|v| *v += b);
        }
        let (n2, gn2) = self.gn2.forward(p, &c1);
        let s2 = ops::silu(&n2);
        let (mut out, conv2) = self.conv2.forward(p, &s2, h, w);
        let skip = match &self.skip {
            Some(conv) => {
                let (s, cache) = conv.forward(p, x, h, w);
                out.iter_mut().zip(&s).for_each(|(o, v)| *o += v);
                Some(cache)
            }
            None => {
                out.iter_mut().zip(x).for_each(|(o, v)| *o += v);
                None
            }
        };
        (out, ResCache { hw: (h, w), gn1, a1: n1, conv1, gn2, a2: n2, conv2, skip })
    }

    /// Returns `dx`; accumulates into `dtemb`.
    pub fn backward(&self, p: &[f64], cache: &ResCache, dy: &[f64], g: &mut [f64], temb: &[f64], dtemb: &mut [f64]) -> Vec<f64> {
        let hw = cache.hw.0 * cache.hw.1;
        let ds2 = self.conv2.backward(p, &cache.conv2, dy, g);
        let mut dn2 = vec![0.0; ds2.len()];
        ops::silu_backward(&cache.a2, &ds2, &mut dn2);
        let dc1 = self.gn2.backward(p, &cache.gn2, &dn2, g);
        let dtb: Vec<f64> = dc1.chunks_exact(hw).map(|r| r.iter().sum()).collect();
        let dt = self.time.backward(p, temb, 1, &dtb, g, true).expect("requested");
        dtemb.iter_mut().zip(&dt).for_each(|(a, b)| *a += b);
        let ds1 = self.conv1.backward(p, &cache.conv1, &dc1, g);
        let mut dn1 = vec![0.0; ds1.len()];
        ops::silu_backward(&cache.a1, &ds1, &mut dn1);
        let mut dx = self.gn1.backward(p, &cache.gn1, &dn1, g);
        match (&self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => {
                let ds = conv.backward(p, sc, dy, g);
                dx.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
            }
            _ => dx.iter_mut().zip(dy).for_each(|(a, b)| *a += b),
        }
        dx
    }
}

/// Number of fixed positional features appended to query tokens.
pub const QUERY_POS: usize = 8;
/// Number of fixed positional features appended to condition tokens.
pub const KEY_POS: usize = 3 + QUERY_POS;

fn axis_features(i: usize, r: usize, out: &mut [f64]) {
    let u = std::f64::consts::PI * (i as f64 + 0.5) / r as f64;
    out[0] = u.sin();
    out[1] = u.cos();
    out[2] = (2.0 * u).sin();
    out[3] = (2.0 * u).cos();
}

/// Row/column features for the `r * r` spatial sites, `[r^2, QUERY_POS]`.
pub fn query_positions(r: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * r * QUERY_POS];
    for i in 0..r {
        for j in 0..r {
            let row = &mut out[(i * r + j) * QUERY_POS..][..QUERY_POS];
            axis_features(i, r, &mut row[..4]);
            axis_features(j, r, &mut row[4..]);
        }
    }
    out
}

/// Condition tokens at resolution `r`: each plane of a `[3, K, H, W]`
/// condition is average-pooled to `r x r` and every site becomes one token
/// (K values, plane one-hot, row/column features). Returns `[3 r^2, K + KEY_POS]`.
pub fn condition_tokens(cond: &[f64], k: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let dim = k + KEY_POS;
    let qp = query_positions(r);
    let mut out = vec![0.0; 3 * r * r * dim];
    for plane in 0..3 {
        let pooled = ops::avg_pool(&cond[plane * k * h * w..][..k * h * w], k, h, w, h / r);
        for s in 0..r * r {
            let tok = &mut out[(plane * r * r + s) * dim..][..dim];
            for c in 0..k {
                tok[c] = pooled[c * r * r + s];
            }
            tok[k + plane] = 1.0;
            tok[k + 3..].copy_from_slice(&qp[s * QUERY_POS..][..QUERY_POS]);
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Attention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

struct AttnCache {
    norm: NormCache,
    tokens: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    attended: Vec<f64>,
}

/// Residual self-attention over spatial tokens, optionally followed by
/// residual cross-attention onto condition tokens.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub channels: usize,
    pub heads: usize,
    this: Attention,
    cross: Option<Attention>,
}

pub struct AttnBlockCache {
    n: usize,
    m: usize,
    this: AttnCache,
    cross: Option<AttnCache>,
}

impl AttnBlock {
    /// `cond_dim` is the raw condition width per token (before positional features).
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, heads: usize, groups: usize, cond_dim: Option<usize>) -> Self {
        pb.push(name);
        pb.push("self");
        let this = Attention {
            norm: GroupNorm::new(pb, "norm", channels, groups),
            q: Linear::new(pb, "q", channels, channels, false),
            k: Linear::new(pb, "k", channels, channels, false),
            v: Linear::new(pb, "v", channels, channels, false),
            o: Linear::new(pb, "out", channels, channels, false),
        };
        pb.pop();
        let cross = cond_dim.map(|cd| {
            pb.push("cross");
            let a = Attention {
                norm: GroupNorm::new(pb, "norm", channels, groups),
                q: Linear::new(pb, "q", channels + QUERY_POS, channels, false),
                k: Linear::new(pb, "k", cd + KEY_POS, channels, false),
                v: Linear::new(pb, "v", cd + KEY_POS, channels, false),
                o: Linear::new(pb, "out", channels, channels, false),
            };
            pb.pop();
            a
        });
        pb.pop();
        AttnBlock { channels, heads, this, cross }
    }

    pub fn has_cross(&self) -> bool {
        self.cross.is_some()
    }

    /// `x` is `[channels, r^2]`; `cond` is `[3 r^2, cond_dim + KEY_POS]` when the
    /// block cross-attends.
    pub fn forward(&self, p: &[f64], x: &[f64], r: usize, cond: Option<&[f64]>) -> (Vec<f64>, AttnBlockCache) {
        let ch = self.channels;
        let n = r * r;
        let (n1, norm) = self.this.norm.forward(p, x);
        let tokens = ops::transpose(&n1, ch, n);
        let q = self.this.q.forward(p, &tokens, n);
        let k = self.this.k.forward(p, &tokens, n);
        let v = self.this.v.forward(p, &tokens, n);
        let (attended, probs) = ops::attention_forward(&q, &k, &v, n, n, ch, self.heads);
        let o = self.this.o.forward(p, &attended, n);
        let mut h = x.to_vec();
        add_transposed(&mut h, &o, n, ch);
        let this = AttnCache { norm, tokens, q, k, v, probs, attended };
        let mut m = 0;
        let cross = match (&self.cross, cond) {
            (Some(a), Some(cond)) => {
                let kd = a.k.in_f;
                m = cond.len() / kd;
                assert_eq!(m, 3 * n, "cross-attention expects 3 r^2 condition tokens");
                let (n2, norm) = a.norm.forward(p, &h);
                let t2 = ops::transpose(&n2, ch, n);
                let qp = query_positions(r);
                let mut tokens = vec![0.0; n * (ch + QUERY_POS)];
                for s in 0..n {
                    let row = &mut tokens[s * (ch + QUERY_POS)..][..ch + QUERY_POS];
                    row[..ch].copy_from_slice(&t2[s * ch..][..ch]);
                    row[ch..].copy_from_slice(&qp[s * QUERY_POS..][..QUERY_POS]);
                }
                let q = a.q.forward(p, &tokens, n);
                let k = a.k.forward(p, cond, m);
                let v = a.v.forward(p, cond, m);
                let (attended, probs) = ops::attention_forward(&q, &k, &v, n, m, ch, self.heads);
                let o = a.o.forward(p, &attended, n);
                add_transposed(&mut h, &o, n, ch);
                Some(AttnCache { norm, tokens, q, k, v, probs, attended })
            }
            (None, None) => None,
            _ => panic!("condition tokens must be supplied exactly when the block cross-attends"),
        };
        (h, AttnBlockCache { n, m, this, cross })
    }

    pub fn backward(&self, p: &[f64], cache: &AttnBlockCache, cond: Option<&[f64]>, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let ch = self.channels;
        let n = cache.n;
        let mut dh = dy.to_vec();
        if let (Some(a), Some(c), Some(cond)) = (&self.cross, &cache.cross, cond) {
            let m = cache.m;
            let dout = ops::transpose(dy, ch, n);
            let datt = a.o.backward(p, &c.attended, n, &dout, g, true).expect("requested");
            let (dq, dk, dv) = ops::attention_backward(&c.q, &c.k, &c.v, &c.probs, &datt, n, m, ch, self.heads);
            a.k.backward(p, cond, m, &dk, g, false);
            a.v.backward(p, cond, m, &dv, g, false);
            let dtok = a.q.backward(p, &c.tokens, n, &dq, g, true).expect("requested");
            let mut dn2 = vec![0.0; ch * n];
            for s in 0..n {
                for cc in 0..ch {
                    dn2[cc * n + s] = dtok[s * (ch + QUERY_POS) + cc];
                }
            }
            let dx2 = a.norm.backward(p, &c.norm, &dn2, g);
            dh.iter_mut().zip(&dx2).for_each(|(a, b)| *a += b);
        }
        let c = &cache.this;
        let dout = ops::transpose(&dh, ch, n);
        let datt = self.this.o.backward(p, &c.attended, n, &dout, g, true).expect("requested");
        let (dq, dk, dv) = ops::attention_backward(&c.q, &c.k, &c.v, &c.probs, &datt, n, n, ch, self.heads);
        let mut dtok = self.this.q.backward(p, &c.tokens, n, &dq, g, true).expect("requested");
        for (lin, d) in [(&self.this.k, &dk), (&self.this.v, &dv)] {
            let part = lin.backward(p, &c.tokens, n, d, g, true).expect("requested");
            dtok.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        let dn1 = ops::transpose(&dtok, n, ch);
        let dx = self.this.norm.backward(p, &c.norm, &dn1, g);
        dh.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        dh
    }
}

/// `h[c, s] += o[s, c]`.
fn add_transposed(h: &mut [f64], o: &[f64], n: usize, ch: usize) {
    for s in 0..n {
        for c in 0..ch {
            h[c * n + s] += o[s * ch + c];
        }
    }
}
