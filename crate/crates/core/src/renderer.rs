//! Orthographic emission-absorption rendering of triplanes, with an analytic
//! decoder for capsule triplanes, a small learned decoder, PPM output and a
//! backward pass used by the reconstruction loss.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::ops::{self, sigmoid, softplus};
use crate::error::{invalid_arg, invalid_data, shape_err, FormatError, Result};
use crate::rng::{self, Rng};
use crate::skeleton::{PlaneId, Skeleton, Vec3, WorldBounds};
use crate::synthetic::{capsule_distance, CapsuleCharacter};
use crate::tensor::Tensor;
use crate::triplane::{bilinear_stencil, Triplane};

/// Camera placement. Axis views look at the origin from the named side; the
/// `+z` view has image right = +x and image up = +y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
    /// Degrees; azimuth 0 and elevation 0 coincide with `+z`.
    Orbit { azimuth: f64, elevation: f64 },
}

impl View {
    pub const AXES: [View; 6] = [View::PosX, View::NegX, View::PosY, View::NegY, View::PosZ, View::NegZ];

    /// `(forward, right, up)` unit vectors.
    pub fn basis(&self) -> Result<(Vec3, Vec3, Vec3)> {
        Ok(match *self {
            View::PosX => ([-1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]),
            View::NegX => ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
            View::PosY => ([0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]),
            View::NegY => ([0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
            View::PosZ => ([0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            View::NegZ => ([0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            View::Orbit { azimuth, elevation } => {
                if !(azimuth.is_finite() && elevation.is_finite() && elevation.abs() < 89.0) {
                    return Err(invalid_arg(format!("orbit elevation must lie in (-89, 89) degrees, got {}", elevation)));
                }
                let (az, el) = (azimuth.to_radians(), elevation.to_radians());
                let eye = [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()];
                let f = [-eye[0], -eye[1], -eye[2]];
                let r = normalize(cross(f, [0.0, 1.0, 0.0]));
                let u = cross(r, f);
                (f, r, u)
            }
        })
    }

    fn is_axis(&self) -> bool {
        !matches!(self, View::Orbit { .. })
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            View::PosX => f.write_str("+x"),
            View::NegX => f.write_str("-x"),
            View::PosY => f.write_str("+y"),
            View::NegY => f.write_str("-y"),
            View::PosZ => f.write_str("+z"),
            View::NegZ => f.write_str("-z"),
            View::Orbit { azimuth, elevation } => write!(f, "{},{}", azimuth, elevation),
        }
    }
}

impl FromStr for View {
    type Err = crate::Error;

    /// `+x`, `-x`, `+y`, `-y`, `+z`, `-z`, or `azimuth,elevation` in degrees.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "+x" | "x" => View::PosX,
            "-x" => View::NegX,
            "+y" | "y" => View::PosY,
            "-y" => View::NegY,
            "+z" | "z" => View::PosZ,
            "-z" => View::NegZ,
            _ => {
                let parts: Vec<&str> = s.split(',').collect();
                let parse = |p: &str| p.trim().parse::<f64>().map_err(|_| invalid_arg(format!("bad view '{}'", s)));
                if parts.len() != 2 {
                    return Err(invalid_arg(format!("bad view '{}': use +x/-x/+y/-y/+z/-z or azimuth,elevation", s)));
                }
                let v = View::Orbit { azimuth: parse(parts[0])?, elevation: parse(parts[1])? };
                v.basis()?;
                v
            }
        })
    }
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    #[default]
    Analytic,
    Learned,
}

/// `density = scale * softplus(steepness * (g0 - iso))` where `g0` is the
/// plane-averaged occupancy channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticDecoder {
    pub steepness: f64,
    pub iso: f64,
}

impl Default for AnalyticDecoder {
    fn default() -> Self {
        AnalyticDecoder { steepness: 20.0, iso: 0.5 }
    }
}

impl AnalyticDecoder {
    /// Capsule triplanes average to exactly 1 inside a body and fall off
    /// within one band outside it. An iso level just below 1 puts the
    /// surface within a fraction of a band of the capsule boundary.
    pub fn silhouette() -> Self {
        AnalyticDecoder { steepness: 60.0, iso: 0.97 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub size: usize,
    pub view: View,
    pub samples: usize,
    pub density_scale: f64,
    #[serde(default)]
    pub decoder: DecoderMode,
    #[serde(default)]
    pub analytic: AnalyticDecoder,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            size: 64,
            view: View::PosZ,
            samples: 128,
            density_scale: 1.0,
            decoder: DecoderMode::Analytic,
            analytic: AnalyticDecoder::default(),
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(invalid_arg("samples per ray must be at least 2"));
        }
        if self.size < 8 {
            return Err(invalid_arg("image size must be at least 8"));
        }
        if !(self.density_scale >= 0.0 && self.density_scale.is_finite()) {
            return Err(invalid_arg("density scale must be finite and non-negative"));
        }
        self.view.basis()?;
        Ok(())
    }
}

/// Premultiplied RGB on black plus alpha, row-major from the top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, rgb: vec![0.0; 3 * width * height], alpha: vec![0.0; width * height] }
    }

    /// 8-bit RGB as written to PPM.
    pub fn quantize(&self) -> Vec<u8> {
        self.rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.rgb
            .iter()
            .zip(&other.rgb)
            .chain(self.alpha.iter().zip(&other.alpha))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Tile equally sized frames left to right.
pub fn contact_sheet(frames: &[Image]) -> Result<Image> {
    let first = frames.first().ok_or_else(|| invalid_arg("no frames to tile"))?;
    let (w, h) = (first.width, first.height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(shape_err("frames differ in size"));
    }
    let k = frames.len();
    let mut out = Image::new(w * k, h);
    for (i, f) in frames.iter().enumerate() {
        for y in 0..h {
            let dst = y * w * k + i * w;
            out.alpha[dst..dst + w].copy_from_slice(&f.alpha[y * w..(y + 1) * w]);
            out.rgb[3 * dst..3 * (dst + w)].copy_from_slice(&f.rgb[3 * y * w..3 * (y + 1) * w]);
        }
    }
    Ok(out)
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(invalid_arg("empty output path"));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(img.quantize());
    fs::write(path, bytes)?;
    Ok(())
}

/// Decoded binary PPM: `(width, height, rgb bytes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn read_ppm(path: &Path) -> Result<Ppm> {
    parse_ppm(&fs::read(path)?)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Ppm> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::Truncated { expected: pos + 1, actual: bytes.len() }.into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        let mut magic = [0u8; 4];
        magic[..bytes.len().min(2)].copy_from_slice(&bytes[..bytes.len().min(2)]);
        return Err(FormatError::BadMagic(magic).into());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| invalid_data(format!("bad PPM header field '{}'", s)));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(invalid_data(format!("only 8-bit PPM is supported, maxval {}", maxval)));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    let want = 3 * width * height;
    if data.len() < want {
        return Err(FormatError::Truncated { expected: want, actual: data.len() }.into());
    }
    if data.len() > want {
        return Err(FormatError::TrailingBytes(data.len() - want).into());
    }
    Ok(Ppm { width, height, data: data.to_vec() })
}

/// Float64 view of triplane features, as rendered.
#[derive(Clone, Debug)]
pub struct FeaturePlanes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bounds: WorldBounds,
    /// `[3, C, H, W]`
    pub geometry: Vec<f64>,
    /// `[3, C, H, W]`
    pub color: Vec<f64>,
}

impl FeaturePlanes {
    pub fn from_triplane(t: &Triplane) -> Self {
        FeaturePlanes {
            channels: t.channels(),
            height: t.height(),
            width: t.width(),
            bounds: *t.bounds(),
            geometry: t.geometry().iter().map(|&v| v as f64).collect(),
            color: t.color().iter().map(|&v| v as f64).collect(),
        }
    }

    /// From a `[6C, H, W]` latent (per plane: geometry block then color block).
    pub fn from_latent(latent: &Tensor, bounds: WorldBounds) -> Result<Self> {
        let (k, h, w) = match latent.shape() {
            &[k, h, w] if k % 6 == 0 && k > 0 => (k, h, w),
            s => return Err(shape_err(format!("latent must be [6C, H, W], got {:?}", s))),
        };
        let c = k / 6;
        let hw = h * w;
        let mut geometry = Vec::with_capacity(3 * c * hw);
        let mut color = Vec::with_capacity(3 * c * hw);
        for p in 0..3 {
            let block = &latent.data()[p * 2 * c * hw..][..2 * c * hw];
            geometry.extend_from_slice(&block[..c * hw]);
            color.extend_from_slice(&block[c * hw..]);
        }
        Ok(FeaturePlanes { channels: c, height: h, width: w, bounds, geometry, color })
    }

    /// Inverse layout of [`FeaturePlanes::from_latent`] for gradients.
    pub fn to_latent_layout(&self, geometry: &[f64], color: &[f64]) -> Vec<f64> {
        let (c, hw) = (self.channels, self.height * self.width);
        let mut out = Vec::with_capacity(6 * c * hw);
        for p in 0..3 {
            out.extend_from_slice(&geometry[p * c * hw..][..c * hw]);
            out.extend_from_slice(&color[p * c * hw..][..c * hw]);
        }
        out
    }

    fn taps(&self, p: Vec3) -> Option<[(usize, [usize; 4], [f64; 4]); 3]> {
        if !self.bounds.contains(p) {
            return None;
        }
        Some(std::array::from_fn(|k| {
            let plane = PlaneId::ALL[k];
            let s = bilinear_stencil(&self.bounds, plane, p, self.height, self.width);
            (k * self.channels * self.height * self.width, s.offsets, s.weights)
        }))
    }

    fn sample(&self, field: &[f64], taps: &[(usize, [usize; 4], [f64; 4]); 3], ch: usize) -> f64 {
        let hw = self.height * self.width;
        let mut v = 0.0;
        for (base, off, w) in taps {
            let plane = &field[base + ch * hw..][..hw];
            v += w[0] * plane[off[0]] + w[1] * plane[off[1]] + w[2] * plane[off[2]] + w[3] * plane[off[3]];
        }
        v
    }

    fn scatter(&self, grad: &mut [f64], taps: &[(usize, [usize; 4], [f64; 4]); 3], ch: usize, g: f64) {
        let hw = self.height * self.width;
        for (base, off, w) in taps {
            let plane = &mut grad[base + ch * hw..][..hw];
            for q in 0..4 {
                plane[off[q]] += w[q] * g;
            }
        }
    }
}

/// Two-layer MLP from the concatenated geometry and color query to density
/// (softplus) and color (sigmoid).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedDecoder {
    pub channels: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub const DECODER_FILE: &str = "decoder.json";

impl LearnedDecoder {
    pub fn new(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        let inp = 2 * channels;
        let s1 = 1.0 / (inp as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        LearnedDecoder {
            channels,
            hidden,
            w1: (0..hidden * inp).map(|_| s1 * rng::normal(rng)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..4 * hidden).map(|_| s2 * rng::normal(rng)).collect(),
            b2: vec![0.0; 4],
        }
    }

    fn raw(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = ops::linear_forward(x, 1, 2 * self.channels, self.hidden, &self.w1, &self.b1);
        let a = ops::silu(&h);
        let o = ops::linear_forward(&a, 1, self.hidden, 4, &self.w2, &self.b2);
        (h, a, o)
    }

    /// `(density, rgb)` for a plane-averaged feature vector of length `2C`.
    pub fn decode(&self, x: &[f64]) -> (f64, [f64; 3]) {
        let (_, _, o) = self.raw(x);
        (softplus(o[0]), [sigmoid(o[1]), sigmoid(o[2]), sigmoid(o[3])])
    }

    /// Regress the analytic decoder on random points of the given triplanes.
    pub fn fit(&mut self, planes: &[FeaturePlanes], target: &AnalyticDecoder, iterations: usize, seed: u64) -> f64 {
        use rand::Rng as _;
        let mut r = rng::seeded(seed);
        let np = self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len();
        let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
        let mut last = 0.0;
        for it in 1..=iterations {
            let mut grads = vec![0.0; np];
            let mut loss = 0.0;
            let batch = 64;
            for _ in 0..batch {
                let fp = &planes[r.gen_range(0..planes.len())];
                let b = fp.bounds;
                let p = [0, 1, 2].map(|a| r.gen_range(b.min[a]..b.max[a]));
                let (x, (dt, ct)) = match fp.taps(p) {
                    Some(t) => (average_features(fp, &t), decode_analytic(fp, &t, target, 1.0)),
                    None => continue,
                };
                let (h, a, o) = self.raw(&x);
                let dens = softplus(o[0]);
                let rgb = [sigmoid(o[1]), sigmoid(o[2]), sigmoid(o[3])];
                let wd = 1.0 / (1.0 + dt);
                let mut dout = [0.0; 4];
                loss += wd * (dens - dt).powi(2);
                dout[0] = 2.0 * wd * (dens - dt) * sigmoid(o[0]);
                for k in 0..3 {
                    loss += (rgb[k] - ct[k]).powi(2);
                    dout[k + 1] = 2.0 * (rgb[k] - ct[k]) * rgb[k] * (1.0 - rgb[k]);
                }
                let (g1, rest) = grads.split_at_mut(self.w1.len());
                let (gb1, rest) = rest.split_at_mut(self.b1.len());
                let (g2, gb2) = rest.split_at_mut(self.w2.len());
                let da = ops::linear_backward(&a, 1, self.hidden, 4, &self.w2, &dout, g2, gb2, true).expect("requested");
                let mut dh = vec![0.0; self.hidden];
                ops::silu_backward(&h, &da, &mut dh);
                ops::linear_backward(&x, 1, 2 * self.channels, self.hidden, &self.w1, &dh, g1, gb1, false);
            }
            last = loss / batch as f64;
            let lr = 3e-3;
            let mut idx = 0;
            for param in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
                for p in param.iter_mut() {
                    let g = grads[idx] / batch as f64;
                    m[idx] = 0.9 * m[idx] + 0.1 * g;
                    v[idx] = 0.999 * v[idx] + 0.001 * g * g;
                    let mh = m[idx] / (1.0 - 0.9f64.powi(it as i32));
                    let vh = v[idx] / (1.0 - 0.999f64.powi(it as i32));
                    *p -= lr * mh / (vh.sqrt() + 1e-8);
                    idx += 1;
                }
            }
        }
        last
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(DECODER_FILE), serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: LearnedDecoder = serde_json::from_str(&fs::read_to_string(dir.join(DECODER_FILE))?)
            .map_err(|e| FormatError::Manifest(e.to_string()))?;
        let inp = 2 * d.channels;
        if d.w1.len() != d.hidden * inp || d.b1.len() != d.hidden || d.w2.len() != 4 * d.hidden || d.b2.len() != 4 {
            return Err(FormatError::Manifest("decoder weight shapes are inconsistent".into()).into());
        }
        Ok(d)
    }
}

fn average_features(fp: &FeaturePlanes, taps: &[(usize, [usize; 4], [f64; 4]); 3]) -> Vec<f64> {
    let c = fp.channels;
    let mut x = Vec::with_capacity(2 * c);
    for k in 0..c {
        x.push(fp.sample(&fp.geometry, taps, k) / 3.0);
    }
    for k in 0..c {
        x.push(fp.sample(&fp.color, taps, k) / 3.0);
    }
    x
}

fn decode_analytic(fp: &FeaturePlanes, taps: &[(usize, [usize; 4], [f64; 4]); 3], d: &AnalyticDecoder, scale: f64) -> (f64, [f64; 3]) {
    let g0 = fp.sample(&fp.geometry, taps, 0) / 3.0;
    let rgb = [0, 1, 2].map(|k| if k < fp.channels { (fp.sample(&fp.color, taps, k) / 3.0).clamp(0.0, 1.0) } else { 0.0 });
    (scale * softplus(d.steepness * (g0 - d.iso)), rgb)
}

/// Density and color at a world point with the analytic decoder (scale 1).
pub fn decode(t: &Triplane, p: Vec3, decoder: &AnalyticDecoder) -> (f64, [f64; 3]) {
    let fp = FeaturePlanes::from_triplane(t);
    match fp.taps(p) {
        Some(taps) => decode_analytic(&fp, &taps, decoder, 1.0),
        None => (softplus(-decoder.steepness * decoder.iso), [0.0; 3]),
    }
}

struct Camera {
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    center: Vec3,
    half_w: f64,
    half_h: f64,
    half_depth: f64,
}

impl Camera {
    fn new(view: &View, bounds: &WorldBounds) -> Result<Self> {
        let (forward, right, up) = view.basis()?;
        let center = bounds.center();
        let ext = [bounds.extent(0), bounds.extent(1), bounds.extent(2)];
        let along = |v: Vec3| 0.5 * (0..3).map(|a| (v[a] * ext[a]).abs()).sum::<f64>();
        let (half_w, half_h, half_depth) = if view.is_axis() {
            (along(right), along(up), along(forward))
        } else {
            let r = 0.5 * (ext[0] * ext[0] + ext[1] * ext[1] + ext[2] * ext[2]).sqrt();
            (r, r, r)
        };
        Ok(Camera { forward, right, up, center, half_w, half_h, half_depth })
    }

    /// Ray origin (at the near side) for pixel `(row, col)`.
    fn origin(&self, row: usize, col: usize, size: usize) -> Vec3 {
        let x = ((col as f64 + 0.5) / size as f64 * 2.0 - 1.0) * self.half_w;
        let y = (1.0 - (row as f64 + 0.5) / size as f64 * 2.0) * self.half_h;
        [0, 1, 2].map(|a| self.center[a] + x * self.right[a] + y * self.up[a] - self.half_depth * self.forward[a])
    }

    fn point(&self, origin: Vec3, s: f64) -> Vec3 {
        [0, 1, 2].map(|a| origin[a] + s * self.forward[a])
    }
}

pub fn render(t: &Triplane, cfg: &RenderConfig) -> Result<Image> {
    render_planes(&FeaturePlanes::from_triplane(t), cfg, None)
}

pub fn render_with_decoder(t: &Triplane, cfg: &RenderConfig, decoder: Option<&LearnedDecoder>) -> Result<Image> {
    render_planes(&FeaturePlanes::from_triplane(t), cfg, decoder)
}

pub fn render_planes(fp: &FeaturePlanes, cfg: &RenderConfig, learned: Option<&LearnedDecoder>) -> Result<Image> {
    cfg.validate()?;
    let learned = match cfg.decoder {
        DecoderMode::Analytic => None,
        DecoderMode::Learned => {
            let d = learned.ok_or_else(|| invalid_arg("learned decoder mode needs decoder weights"))?;
            if d.channels != fp.channels {
                return Err(shape_err(format!("decoder expects C = {}, triplane has {}", d.channels, fp.channels)));
            }
            Some(d)
        }
    };
    let cam = Camera::new(&cfg.view, &fp.bounds)?;
    let n = cfg.size;
    let delta = 2.0 * cam.half_depth / cfg.samples as f64;
    let outside = cfg.density_scale * softplus(-cfg.analytic.steepness * cfg.analytic.iso);
    let mut img = Image::new(n, n);
    for row in 0..n {
        for col in 0..n {
            let o = cam.origin(row, col, n);
            let mut trans = 1.0;
            let mut rgb = [0.0; 3];
            for i in 0..cfg.samples {
                let p = cam.point(o, (i as f64 + 0.5) * delta);
                let (sigma, c) = match (fp.taps(p), learned) {
                    (Some(taps), None) => decode_analytic(fp, &taps, &cfg.analytic, cfg.density_scale),
                    (Some(taps), Some(d)) => {
                        let (s, c) = d.decode(&average_features(fp, &taps));
                        (cfg.density_scale * s, c)
                    }
                    (None, None) => (outside, [0.0; 3]),
                    (None, Some(d)) => {
                        let (s, c) = d.decode(&vec![0.0; 2 * fp.channels]);
                        (cfg.density_scale * s, c)
                    }
                };
                let alpha = 1.0 - (-sigma * delta).exp();
                let w = trans * alpha;
                for k in 0..3 {
                    rgb[k] += w * c[k];
                }
                trans *= 1.0 - alpha;
            }
            let px = row * n + col;
            img.alpha[px] = 1.0 - trans;
            img.rgb[3 * px..3 * px + 3].copy_from_slice(&rgb);
        }
    }
    Ok(img)
}

/// Analytic-mode render together with the gradient of `sum(d_rgb * rgb) +
/// sum(d_alpha * alpha)` with respect to the geometry and color features.
pub fn render_backward(fp: &FeaturePlanes, cfg: &RenderConfig, d_rgb: &[f64], d_alpha: &[f64]) -> Result<(Image, Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if cfg.decoder != DecoderMode::Analytic {
        return Err(invalid_arg("gradients are only available for the analytic decoder"));
    }
    let n = cfg.size;
    if d_rgb.len() != 3 * n * n || d_alpha.len() != n * n {
        return Err(shape_err("image cotangent does not match the render size"));
    }
    let cam = Camera::new(&cfg.view, &fp.bounds)?;
    let delta = 2.0 * cam.half_depth / cfg.samples as f64;
    let dec = cfg.analytic;
    let outside = cfg.density_scale * softplus(-dec.steepness * dec.iso);
    let mut img = Image::new(n, n);
    let mut g_geo = vec![0.0; fp.geometry.len()];
    let mut g_col = vec![0.0; fp.color.len()];
    let nc = fp.channels.min(3);
    struct Sample {
        taps: Option<[(usize, [usize; 4], [f64; 4]); 3]>,
        dsigma: f64,
        trans: f64,
        alpha: f64,
        rgb: [f64; 3],
        raw: [f64; 3],
    }
    let mut samples: Vec<Sample> = Vec::with_capacity(cfg.samples);
    for row in 0..n {
        for col in 0..n {
            let px = row * n + col;
            let o = cam.origin(row, col, n);
            samples.clear();
            let mut trans = 1.0;
            let mut rgb = [0.0; 3];
            for i in 0..cfg.samples {
                let p = cam.point(o, (i as f64 + 0.5) * delta);
                let taps = fp.taps(p);
                let (sigma, dsigma, c, raw) = match &taps {
                    Some(t) => {
                        let g0 = fp.sample(&fp.geometry, t, 0) / 3.0;
                        let z = dec.steepness * (g0 - dec.iso);
                        let raw = [0, 1, 2].map(|k| if k < nc { fp.sample(&fp.color, t, k) / 3.0 } else { 0.0 });
                        (cfg.density_scale * softplus(z), cfg.density_scale * dec.steepness * sigmoid(z), raw.map(|v| v.clamp(0.0, 1.0)), raw)
                    }
                    None => (outside, 0.0, [0.0; 3], [0.0; 3]),
                };
                let alpha = 1.0 - (-sigma * delta).exp();
                samples.push(Sample { taps, dsigma, trans, alpha, rgb: c, raw });
                let w = trans * alpha;
                for k in 0..3 {
                    rgb[k] += w * c[k];
                }
                trans *= 1.0 - alpha;
            }
            img.alpha[px] = 1.0 - trans;
            img.rgb[3 * px..3 * px + 3].copy_from_slice(&rgb);
            let dr = [d_rgb[3 * px], d_rgb[3 * px + 1], d_rgb[3 * px + 2]];
            let da = d_alpha[px];
            // back-to-front sweep with suffix sums of the composited color
            let t_final = trans;
            let mut suffix = [0.0; 3];
            for s in samples.iter().rev() {
                let t_after = s.trans * (1.0 - s.alpha);
                let w = s.trans * s.alpha;
                let mut dsig = 0.0;
                for k in 0..3 {
                    dsig += dr[k] * delta * (t_after * s.rgb[k] - suffix[k]);
                }
                dsig += da * delta * t_final;
                if let Some(t) = &s.taps {
                    let dg0 = dsig * s.dsigma / 3.0;
                    if dg0 != 0.0 {
                        fp.scatter(&mut g_geo, t, 0, dg0);
                    }
                    for k in 0..nc {
                        if s.raw[k] > 0.0 && s.raw[k] < 1.0 {
                            let dc = dr[k] * w / 3.0;
                            if dc != 0.0 {
                                fp.scatter(&mut g_col, t, k, dc);
                            }
                        }
                    }
                }
                for k in 0..3 {
                    suffix[k] += w * s.rgb[k];
                }
            }
        }
    }
    Ok((img, g_geo, g_col))
}

/// Binary silhouette of the capsule set along the camera rays, by sphere
/// tracing the exact capsule distance.
pub fn capsule_silhouette(ch: &CapsuleCharacter, posed: &Skeleton, bounds: &WorldBounds, view: &View, size: usize) -> Result<Vec<bool>> {
    let cam = Camera::new(view, bounds)?;
    let mut out = vec![false; size * size];
    for row in 0..size {
        for col in 0..size {
            let o = cam.origin(row, col, size);
            let mut s = 0.0;
            while s <= 2.0 * cam.half_depth {
                let (d, _) = capsule_distance(ch, posed, cam.point(o, s));
                if d <= 1e-9 {
                    out[row * size + col] = true;
                    break;
                }
                s += d.max(1e-9);
            }
        }
    }
    Ok(out)
}

/// Intersection over union of `alpha >= threshold` against a reference mask.
pub fn silhouette_iou(alpha: &[f64], reference: &[bool], threshold: f64) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&a, &r) in alpha.iter().zip(reference) {
        let m = a >= threshold;
        inter += (m && r) as usize;
        uni += (m || r) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}


/// Settings used to compare renders of capsule triplanes against the exact
/// capsule silhouette.
pub fn silhouette_config(view: View) -> RenderConfig {
    RenderConfig {
        size: 64,
        view,
        samples: 512,
        density_scale: 10.0,
        decoder: DecoderMode::Analytic,
        analytic: AnalyticDecoder::silhouette(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{ground_truth_triplane, pose_character, DatasetParams};
    use proptest::prelude::*;

    fn bar_character(z: f64) -> CapsuleCharacter {
        let skel = Skeleton::new(vec![[-0.5, 0.1, z], [0.5, 0.1, z]], vec![(0, 1)]).unwrap();
        CapsuleCharacter::new(0, skel, vec![0.08], vec![[0.9, 0.3, 0.1]]).unwrap()
    }

    fn small(view: View) -> RenderConfig {
        RenderConfig { size: 16, view, samples: 48, density_scale: 5.0, ..Default::default() }
    }

    fn planar_character() -> (CapsuleCharacter, Triplane) {
        let skel = Skeleton::new(vec![[0.0, 0.0, 0.0], [0.4, 0.5, 0.0], [-0.5, -0.3, 0.0]], vec![(0, 1), (0, 2)]).unwrap();
        let ch = CapsuleCharacter::new(0, skel, vec![0.1, 0.06], vec![[0.9, 0.2, 0.2], [0.2, 0.3, 0.9]]).unwrap();
        let t = ground_truth_triplane(&ch, &ch.skeleton, 4, 32, 32, WorldBounds::default()).unwrap();
        (ch, t)
    }

    #[test]
    fn zero_triplane_is_transparent() {
        let t = Triplane::zeros(4, 16, 16, WorldBounds::default());
        let (d, rgb) = decode(&t, [0.1, 0.2, 0.3], &AnalyticDecoder::default());
        assert!((d - softplus(-10.0)).abs() < 1e-15 && d < 1e-4);
        assert_eq!(rgb, [0.0; 3]);
        let img = render(&t, &RenderConfig::default()).unwrap();
        assert!(img.alpha.iter().all(|&a| a < 1e-3));
        assert!(img.rgb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn on_axis_point_has_bone_color() {
        let ch = bar_character(0.0);
        let t = ground_truth_triplane(&ch, &ch.skeleton, 4, 32, 32, WorldBounds::default()).unwrap();
        let (d, rgb) = decode(&t, [0.0, 0.1, 0.0], &AnalyticDecoder::default());
        assert!(d > 9.0, "{}", d);
        for k in 0..3 {
            assert!((rgb[k] - ch.colors[0][k]).abs() < 1e-6);
        }
    }

    #[test]
    fn density_matches_capsule_indicator_outside_the_band() {
        // an axis-aligned bar: away from its caps the three projections
        // intersect in exactly the capsule
        let ch = bar_character(0.0);
        let bounds = WorldBounds::default();
        let t = ground_truth_triplane(&ch, &ch.skeleton, 4, 64, 64, bounds).unwrap();
        let tau = band_width(&bounds);
        let dec = AnalyticDecoder::silhouette();
        let mut r = rng::seeded(4);
        let mut checked = 0;
        for _ in 0..4000 {
            use rand::Rng as _;
            let p = [r.gen_range(-0.4..0.4), r.gen_range(-0.3..0.5), r.gen_range(-0.2..0.2)];
            let (d, _) = capsule_distance(&ch, &ch.skeleton, p);
            let (sigma, _) = decode(&t, p, &dec);
            if d < -tau {
                assert!(sigma > 1.0, "inside point {:?} d {} sigma {}", p, d, sigma);
                checked += 1;
            } else if d > tau {
                assert!(sigma < 1e-2, "outside point {:?} d {} sigma {}", p, d, sigma);
                checked += 1;
            }
        }
        assert!(checked > 3000);
    }

    fn band_width(b: &WorldBounds) -> f64 {
        crate::synthetic::band_width(b, PlaneId::Xy, 64, 64)
    }

    #[test]
    fn z_views_mirror_for_planar_character() {
        let (_, t) = planar_character();
        let a = render(&t, &small(View::PosZ)).unwrap();
        let b = render(&t, &small(View::NegZ)).unwrap();
        let n = 16;
        let mut worst = 0.0f64;
        for row in 0..n {
            for col in 0..n {
                let (i, j) = (row * n + col, row * n + (n - 1 - col));
                worst = worst.max((a.alpha[i] - b.alpha[j]).abs());
                for k in 0..3 {
                    worst = worst.max((a.rgb[3 * i + k] - b.rgb[3 * j + k]).abs());
                }
            }
        }
        assert!(worst < 1e-12, "{}", worst);
        assert!(a.alpha.iter().any(|&v| v > 0.5));
    }

    #[test]
    fn rendering_is_deterministic() {
        let (_, t) = planar_character();
        let cfg = small(View::Orbit { azimuth: 30.0, elevation: 20.0 });
        let a = render(&t, &cfg).unwrap();
        let b = render(&t, &cfg).unwrap();
        assert!(a.rgb.iter().zip(&b.rgb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.alpha.iter().zip(&b.alpha).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (_, t) = planar_character();
        for cfg in [
            RenderConfig { samples: 1, ..Default::default() },
            RenderConfig { size: 7, ..Default::default() },
            RenderConfig { density_scale: -1.0, ..Default::default() },
            RenderConfig { view: View::Orbit { azimuth: 0.0, elevation: 90.0 }, ..Default::default() },
            RenderConfig { decoder: DecoderMode::Learned, ..Default::default() },
        ] {
            assert!(render(&t, &cfg).is_err());
        }
        assert!("sideways".parse::<View>().is_err());
        assert_eq!("-z".parse::<View>().unwrap(), View::NegZ);
        assert_eq!("30,15".parse::<View>().unwrap(), View::Orbit { azimuth: 30.0, elevation: 15.0 });
    }

    #[test]
    fn orbit_zero_matches_front_view() {
        let (_, t) = planar_character();
        let a = render(&t, &small(View::PosZ)).unwrap();
        let b = render(&t, &small(View::Orbit { azimuth: 0.0, elevation: 0.0 })).unwrap();
        // the orbit frame is sized to the bounding sphere, so compare the centre pixel only
        let c = 8 * 16 + 8;
        assert!((a.alpha[c] - b.alpha[c]).abs() < 0.05);
    }

    #[test]
    fn ppm_round_trip_and_strip() {
        let (_, t) = planar_character();
        let img = render(&t, &small(View::PosZ)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!((back.width, back.height), (16, 16));
        assert_eq!(back.data, img.quantize());
        assert!(write_ppm(&img, Path::new("")).is_err());
        let frames = vec![img.clone(); 14];
        let strip = contact_sheet(&frames).unwrap();
        assert_eq!((strip.width, strip.height), (14 * 16, 16));
        assert_eq!(&strip.rgb[3 * 16..3 * 32], &img.rgb[..3 * 16]);
        assert!(contact_sheet(&[]).is_err());
        assert!(parse_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(parse_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (_, t) = planar_character();
        let mut fp = FeaturePlanes::from_triplane(&t);
        let mut r = rng::seeded(8);
        // smooth random features so that no sample sits on a clamp boundary
        for v in fp.geometry.iter_mut() {
            *v = 0.8 * *v + 0.1 * rng::normal(&mut r);
        }
        for v in fp.color.iter_mut() {
            *v = 1.5 + 0.3 * rng::normal(&mut r);
        }
        let cfg = RenderConfig { size: 8, samples: 24, density_scale: 3.0, view: View::Orbit { azimuth: 25.0, elevation: 10.0 }, ..Default::default() };
        let n = 8 * 8;
        let d_rgb: Vec<f64> = (0..3 * n).map(|_| rng::normal(&mut r)).collect();
        let d_alpha: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
        let (_, gg, gc) = render_backward(&fp, &cfg, &d_rgb, &d_alpha).unwrap();
        let objective = |fp: &FeaturePlanes| {
            let img = render_planes(fp, &cfg, None).unwrap();
            img.rgb.iter().zip(&d_rgb).map(|(a, b)| a * b).sum::<f64>() + img.alpha.iter().zip(&d_alpha).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        for _ in 0..6 {
            let dg: Vec<f64> = (0..fp.geometry.len()).map(|_| rng::normal(&mut r)).collect();
            let dc: Vec<f64> = (0..fp.color.len()).map(|_| rng::normal(&mut r)).collect();
            let shifted = |s: f64| {
                let mut f = fp.clone();
                f.geometry.iter_mut().zip(&dg).for_each(|(v, d)| *v += s * d);
                f.color.iter_mut().zip(&dc).for_each(|(v, d)| *v += s * d);
                f
            };
            let fd = (objective(&shifted(h)) - objective(&shifted(-h))) / (2.0 * h);
            let an: f64 = gg.iter().zip(&dg).chain(gc.iter().zip(&dc)).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-6), "fd {} analytic {}", fd, an);
        }
        let (img, _, _) = render_backward(&fp, &cfg, &d_rgb, &d_alpha).unwrap();
        assert_eq!(img, render_planes(&fp, &cfg, None).unwrap());
    }

    #[test]
    fn latent_layout_round_trips() {
        let (_, t) = planar_character();
        let fp = FeaturePlanes::from_latent(&t.to_latent(), *t.bounds()).unwrap();
        let direct = FeaturePlanes::from_triplane(&t);
        assert_eq!(fp.geometry, direct.geometry);
        assert_eq!(fp.color, direct.color);
        assert_eq!(fp.to_latent_layout(&fp.geometry, &fp.color), t.to_latent().into_vec());
    }

    #[test]
    fn axis_silhouettes_match_capsule_oracle() {
        let p = DatasetParams::desk();
        let ch = p.character(1).unwrap();
        let posed = pose_character(&ch, &p.pose_angles(&ch, 2).unwrap()).unwrap();
        let bounds = WorldBounds::default();
        let t = ground_truth_triplane(&ch, &posed, 4, 256, 256, bounds).unwrap();
        for view in [View::PosX, View::NegY, View::PosZ] {
            let img = render(&t, &silhouette_config(view)).unwrap();
            let oracle = capsule_silhouette(&ch, &posed, &bounds, &view, 64).unwrap();
            let iou = silhouette_iou(&img.alpha, &oracle, 0.5);
            assert!(iou >= 0.95, "{}: {}", view, iou);
        }
    }

    #[test]
    fn learned_decoder_fits_and_round_trips() {
        let (_, t) = planar_character();
        let fp = FeaturePlanes::from_triplane(&t);
        let mut r = rng::seeded(2);
        let mut dec = LearnedDecoder::new(4, 16, &mut r);
        let target = AnalyticDecoder::default();
        let first = dec.clone().fit(std::slice::from_ref(&fp), &target, 1, 5);
        let last = dec.fit(std::slice::from_ref(&fp), &target, 300, 5);
        assert!(last < 0.5 * first, "{} -> {}", first, last);
        let dir = tempfile::tempdir().unwrap();
        dec.save(dir.path()).unwrap();
        assert_eq!(LearnedDecoder::load(dir.path()).unwrap(), dec);
        let cfg = RenderConfig { decoder: DecoderMode::Learned, ..small(View::PosZ) };
        let img = render_with_decoder(&t, &cfg, Some(&dec)).unwrap();
        assert!(img.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(img.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn alpha_is_monotone_in_density_scale(s0 in 0.0f64..20.0, ds in 0.0f64..20.0, az in 0.0f64..360.0) {
            let (_, t) = planar_character();
            let view = View::Orbit { azimuth: az, elevation: 15.0 };
            let a = render(&t, &RenderConfig { density_scale: s0, ..small(view) }).unwrap();
            let b = render(&t, &RenderConfig { density_scale: s0 + ds, ..small(view) }).unwrap();
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                prop_assert!(y >= x);
            }
            prop_assert!(a.rgb.iter().chain(&a.alpha).all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
}
