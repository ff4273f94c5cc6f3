//! Triplane feature container.
//!
//! Geometry and color are two separate `3 x C x H x W` float32 tensors in
//! plane-major order (XY, XZ, YZ), then channel, row, column. For convolution
//! the planes are folded into channels: flat channel `k` is plane `k / C`,
//! channel `k % C`.
//!
//! Binary layout (`TRPL`, all little-endian):
//!
//! ```text
//! magic "TRPL" | u32 version=1 | u32 kind | u32 C | u32 H | u32 W
//! 6 x f64 bounds (min xyz, max xyz)
//! geometry 3*C*H*W f32 | color 3*C*H*W f32
//! ```

use std::path::Path;

use crate::error::{invalid_arg, shape_err, FormatError, Result};
use crate::skeleton::{PlaneId, SkeletonEncoding, Vec3, WorldBounds};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TRPL";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 5 * 4 + 6 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriplaneKind {
    Avatar = 0,
    Encoding = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    Geometry,
    Color,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplane {
    kind: TriplaneKind,
    channels: usize,
    height: usize,
    width: usize,
    bounds: WorldBounds,
    geometry: Vec<f32>,
    color: Vec<f32>,
}

impl Triplane {
    pub fn new(
        kind: TriplaneKind,
        channels: usize,
        height: usize,
        width: usize,
        bounds: WorldBounds,
        geometry: Vec<f32>,
        color: Vec<f32>,
    ) -> Result<Self> {
        bounds.validate()?;
        if channels == 0 || height == 0 || width == 0 {
            return Err(invalid_arg("triplane dimensions must be positive"));
        }
        let n = 3 * channels * height * width;
        if geometry.len() != n || color.len() != n {
            return Err(shape_err(format!(
                "triplane 3x{}x{}x{} needs {} values per field, got {} and {}",
                channels,
                height,
                width,
                n,
                geometry.len(),
                color.len()
            )));
        }
        if geometry.iter().chain(&color).any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite.into());
        }
        Ok(Triplane { kind, channels, height, width, bounds, geometry, color })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, bounds: WorldBounds) -> Self {
        let n = 3 * channels * height * width;
        Triplane {
            kind: TriplaneKind::Avatar,
            channels,
            height,
            width,
            bounds,
            geometry: vec![0.0; n],
            color: vec![0.0; n],
        }
    }

    pub fn kind(&self) -> TriplaneKind {
        self.kind
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn bounds(&self) -> &WorldBounds {
        &self.bounds
    }
    pub fn geometry(&self) -> &[f32] {
        &self.geometry
    }
    pub fn color(&self) -> &[f32] {
        &self.color
    }
    pub fn geometry_mut(&mut self) -> &mut [f32] {
        &mut self.geometry
    }
    pub fn color_mut(&mut self) -> &mut [f32] {
        &mut self.color
    }

    pub fn field(&self, field: Field) -> &[f32] {
        match field {
            Field::Geometry => &self.geometry,
            Field::Color => &self.color,
        }
    }

    /// One `H x W` map of `field` on `plane`, channel `c`.
    pub fn plane_channel(&self, field: Field, plane: PlaneId, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.field(field)[(plane.index() * self.channels + c) * hw..][..hw]
    }

    pub fn same_layout(&self, other: &Triplane) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn geometry_tensor(&self) -> Tensor {
        let data = self.geometry.iter().map(|&v| v as f64).collect();
        Tensor::from_vec(&[3, self.channels, self.height, self.width], data).unwrap()
    }

    pub fn color_tensor(&self) -> Tensor {
        let data = self.color.iter().map(|&v| v as f64).collect();
        Tensor::from_vec(&[3, self.channels, self.height, self.width], data).unwrap()
    }

    /// Diffusion latent: per plane the C geometry channels then the C color
    /// channels, folded into `[6C, H, W]`.
    pub fn to_latent(&self) -> Tensor {
        let (c, hw) = (self.channels, self.height * self.width);
        let mut out = Vec::with_capacity(6 * c * hw);
        for p in 0..3 {
            out.extend(self.geometry[p * c * hw..][..c * hw].iter().map(|&v| v as f64));
            out.extend(self.color[p * c * hw..][..c * hw].iter().map(|&v| v as f64));
        }
        Tensor::from_vec(&[6 * c, self.height, self.width], out).unwrap()
    }

    /// Inverse of [`Triplane::to_latent`], taking metadata from `self`. Values are
    /// rounded to f32.
    pub fn with_latent(&self, latent: &Tensor) -> Result<Triplane> {
        let (c, hw) = (self.channels, self.height * self.width);
        if latent.shape() != [6 * c, self.height, self.width] {
            return Err(shape_err(format!(
                "latent {:?} does not match triplane 3x{}x{}x{}",
                latent.shape(),
                c,
                self.height,
                self.width
            )));
        }
        let mut geometry = Vec::with_capacity(3 * c * hw);
        let mut color = Vec::with_capacity(3 * c * hw);
        for p in 0..3 {
            let block = &latent.data()[p * 2 * c * hw..][..2 * c * hw];
            geometry.extend(block[..c * hw].iter().map(|&v| v as f32));
            color.extend(block[c * hw..].iter().map(|&v| v as f32));
        }
        Triplane::new(TriplaneKind::Avatar, c, self.height, self.width, self.bounds, geometry, color)
    }

    /// Sum over the three planes of the bilinearly sampled C-vector at `p`.
    /// Points outside the bounds give zeros.
    pub fn query(&self, p: Vec3, field: Field) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.query_into(p, field, &mut out);
        out
    }

    pub fn query_into(&self, p: Vec3, field: Field, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if !p.iter().all(|v| v.is_finite()) || !self.bounds.contains(p) {
            return;
        }
        let data = self.field(field);
        let hw = self.height * self.width;
        for plane in PlaneId::ALL {
            let s = bilinear_stencil(&self.bounds, plane, p, self.height, self.width);
            for (c, o) in out.iter_mut().enumerate() {
                let base = (plane.index() * self.channels + c) * hw;
                *o += s.weights.iter().zip(&s.offsets).map(|(w, &k)| w * data[base + k] as f64).sum::<f64>();
            }
        }
    }

    pub fn encode_file(&self) -> Vec<u8> {
        let n = self.geometry.len();
        let mut buf = Vec::with_capacity(HEADER_BYTES + 8 * n);
        buf.extend_from_slice(&MAGIC);
        for v in [VERSION, self.kind as u32, self.channels as u32, self.height as u32, self.width as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.bounds.min.iter().chain(&self.bounds.max) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.geometry.iter().chain(&self.color) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode_file(bytes: &[u8]) -> Result<Triplane> {
        if bytes.len() < HEADER_BYTES {
            return Err(FormatError::Truncated { expected: HEADER_BYTES, actual: bytes.len() }.into());
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic).into());
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = u32_at(0);
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let kind = match u32_at(1) {
            0 => TriplaneKind::Avatar,
            1 => TriplaneKind::Encoding,
            k => return Err(FormatError::UnknownKind(k).into()),
        };
        let (c, h, w) = (u32_at(2) as usize, u32_at(3) as usize, u32_at(4) as usize);
        let f64_at = |i: usize| f64::from_le_bytes(bytes[24 + 8 * i..32 + 8 * i].try_into().unwrap());
        let bounds = WorldBounds { min: [f64_at(0), f64_at(1), f64_at(2)], max: [f64_at(3), f64_at(4), f64_at(5)] };
        if bounds.validate().is_err() {
            return Err(FormatError::Manifest(format!("invalid bounds {:?}", bounds)).into());
        }
        let n = 3usize
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| FormatError::Manifest("dimensions overflow".into()))?;
        let expected = HEADER_BYTES + 8 * n;
        if bytes.len() < expected {
            return Err(FormatError::Truncated { expected, actual: bytes.len() }.into());
        }
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes(bytes.len() - expected).into());
        }
        let floats = |start: usize| -> Vec<f32> {
            bytes[start..start + 4 * n]
                .chunks_exact(4)
                .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
                .collect()
        };
        let geometry = floats(HEADER_BYTES);
        let color = floats(HEADER_BYTES + 4 * n);
        if c == 0 || h == 0 || w == 0 {
            return Err(FormatError::Manifest("zero dimension".into()).into());
        }
        Triplane::new(kind, c, h, w, bounds, geometry, color)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_file())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Triplane> {
        Triplane::decode_file(&std::fs::read(path)?)
    }

    /// Debug dump of a skeleton encoding: occupancy repeated into the geometry
    /// block, index repeated into the color block.
    pub fn from_encoding(enc: &SkeletonEncoding, channels: usize, bounds: WorldBounds) -> Result<Triplane> {
        if channels == 0 {
            return Err(invalid_arg("channel count must be at least 1"));
        }
        let hw = enc.height * enc.width;
        let mut geometry = Vec::with_capacity(3 * channels * hw);
        let mut color = Vec::with_capacity(3 * channels * hw);
        for plane in &enc.planes {
            for _ in 0..channels {
                geometry.extend(plane.occupancy.iter().map(|&o| o as f32));
                color.extend(plane.index.iter().map(|&v| v as f32));
            }
        }
        Triplane::new(TriplaneKind::Encoding, channels, enc.height, enc.width, bounds, geometry, color)
    }
}

/// Four taps of a clamp-to-edge bilinear lookup.
pub(crate) struct Stencil {
    pub offsets: [usize; 4],
    pub weights: [f64; 4],
}

pub(crate) fn bilinear_stencil(bounds: &WorldBounds, plane: PlaneId, p: Vec3, height: usize, width: usize) -> Stencil {
    let [u, v] = bounds.to_pixel(plane, p, height, width);
    let (x, y) = (u - 0.5, v - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let clamp_col = |c: f64| c.max(0.0).min(width as f64 - 1.0) as usize;
    let clamp_row = |r: f64| r.max(0.0).min(height as f64 - 1.0) as usize;
    let (c0, c1) = (clamp_col(x0), clamp_col(x0 + 1.0));
    let (r0, r1) = (clamp_row(y0), clamp_row(y0 + 1.0));
    Stencil {
        offsets: [r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1],
        weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    }
}

/// Fold `[3, C, H, W]` into `[3C, H, W]`.
pub fn flatten(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        &[3, c, h, w] => t.clone().reshape(&[3 * c, h, w]),
        s => Err(shape_err(format!("expected [3, C, H, W], got {:?}", s))),
    }
}

/// Unfold `[3C, H, W]` into `[3, C, H, W]`.
pub fn unflatten(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        &[k, h, w] if k % 3 == 0 && k > 0 => t.clone().reshape(&[3, k / 3, h, w]),
        s => Err(shape_err(format!("expected [3C, H, W], got {:?}", s))),
    }
}

/// `(plane, channel)` of flat channel `k` for `c` channels per plane.
pub fn flat_channel(k: usize, c: usize) -> (usize, usize) {
    (k / c, k % c)
}

/// Per-plane condition `[3, 4C, H, W]`: init geometry, init color, then the
/// expanded skeleton maps (`[3, 2C, H, W]`).
pub fn build_condition(init: &Triplane, encoding: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (init.channels(), init.height(), init.width());
    if encoding.shape() != [3, 2 * c, h, w] {
        return Err(shape_err(format!(
            "encoding {:?} does not align with triplane 3x{}x{}x{}",
            encoding.shape(),
            c,
            h,
            w
        )));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(12 * c * hw);
    for p in 0..3 {
        out.extend(init.geometry()[p * c * hw..][..c * hw].iter().map(|&v| v as f64));
        out.extend(init.color()[p * c * hw..][..c * hw].iter().map(|&v| v as f64));
        out.extend_from_slice(&encoding.data()[p * 2 * c * hw..][..2 * c * hw]);
    }
    Tensor::from_vec(&[3, 4 * c, h, w], out)
}

/// Stack the `[6C, H, W]` latent in front of a `[3, 4C, H, W]` condition, per
/// plane, giving `[18C, H, W]` (6C channels per plane).
pub fn stack_with_latent(latent: &Tensor, condition: &Tensor) -> Result<Tensor> {
    let (c4, h, w) = match condition.shape() {
        &[3, k, h, w] if k % 4 == 0 => (k, h, w),
        s => return Err(shape_err(format!("condition must be [3, 4C, H, W], got {:?}", s))),
    };
    let c2 = c4 / 2;
    if latent.shape() != [3 * c2, h, w] {
        return Err(shape_err(format!("latent {:?} vs condition {:?}", latent.shape(), condition.shape())));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(3 * (c2 + c4) * hw);
    for p in 0..3 {
        out.extend_from_slice(&latent.data()[p * c2 * hw..][..c2 * hw]);
        out.extend_from_slice(&condition.data()[p * c4 * hw..][..c4 * hw]);
    }
    Tensor::from_vec(&[3 * (c2 + c4), h, w], out)
}

/// Channel-wise stack used by the concatenation pathway.
pub fn concat_condition(latent: &Tensor, init: &Triplane, encoding: &Tensor) -> Result<Tensor> {
    stack_with_latent(latent, &build_condition(init, encoding)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::skeleton::{encode_skeleton, expand_to_channels, RasterParams, Skeleton};
    use rand::Rng as _;

    fn random_triplane(seed: u64, c: usize, h: usize, w: usize) -> Triplane {
        let mut r = rng::seeded(seed);
        let n = 3 * c * h * w;
        let g = (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let col = (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        Triplane::new(TriplaneKind::Avatar, c, h, w, WorldBounds::default(), g, col).unwrap()
    }

    /// Scalar bilinear lookup written out per plane from the pixel-center definition.
    fn bilinear_oracle(t: &Triplane, field: Field, p: Vec3) -> Vec<f64> {
        let b = t.bounds();
        let (h, w) = (t.height() as i64, t.width() as i64);
        let mut out = vec![0.0; t.channels()];
        for (plane, (a0, a1)) in [(PlaneId::Xy, (0, 1)), (PlaneId::Xz, (0, 2)), (PlaneId::Yz, (1, 2))] {
            let col = (p[a0] - b.min[a0]) / (b.max[a0] - b.min[a0]) * w as f64 - 0.5;
            let row = (b.max[a1] - p[a1]) / (b.max[a1] - b.min[a1]) * h as f64 - 0.5;
            let fetch = |ch: usize, r: i64, c: i64| {
                let (r, c) = (r.clamp(0, h - 1), c.clamp(0, w - 1));
                t.plane_channel(field, plane, ch)[(r * w + c) as usize] as f64
            };
            let (ci, ri) = (col.floor() as i64, row.floor() as i64);
            let (tx, ty) = (col - col.floor(), row - row.floor());
            for (ch, o) in out.iter_mut().enumerate() {
                let top = fetch(ch, ri, ci) * (1.0 - tx) + fetch(ch, ri, ci + 1) * tx;
                let bot = fetch(ch, ri + 1, ci) * (1.0 - tx) + fetch(ch, ri + 1, ci + 1) * tx;
                *o += top * (1.0 - ty) + bot * ty;
            }
        }
        out
    }

    #[test]
    fn flatten_layout() {
        let mut r = rng::seeded(1);
        let t = Tensor::randn(&[3, 6, 8, 8], &mut r);
        let f = flatten(&t).unwrap();
        assert_eq!(f.shape(), &[18, 8, 8]);
        assert_eq!(unflatten(&f).unwrap(), t);
        assert_eq!(flat_channel(7, 6), (1, 1));
        let one = Tensor::randn(&[3, 1, 4, 4], &mut r);
        assert_eq!(flatten(&one).unwrap().data(), one.data());
        assert!(flatten(&Tensor::zeros(&[2, 1, 4, 4])).is_err());
        assert!(unflatten(&Tensor::zeros(&[4, 4, 4])).is_err());
    }

    #[test]
    fn constant_and_zero_queries() {
        let n = 3 * 2 * 4 * 4;
        let t = Triplane::new(TriplaneKind::Avatar, 2, 4, 4, WorldBounds::default(), vec![0.5; n], vec![0.0; n])
            .unwrap();
        assert_eq!(t.query([0.0; 3], Field::Geometry), vec![1.5, 1.5]);
        assert_eq!(t.query([0.3, -0.2, 0.9], Field::Color), vec![0.0, 0.0]);
        // clamp-to-edge inside bounds, zero outside
        assert_eq!(t.query([0.99, 0.99, 0.99], Field::Geometry), vec![1.5, 1.5]);
        assert_eq!(t.query([1.01, 0.0, 0.0], Field::Geometry), vec![0.0, 0.0]);
    }

    #[test]
    fn query_matches_bilinear_oracle() {
        let t = random_triplane(2, 3, 8, 8);
        let mut r = rng::seeded(3);
        for _ in 0..10 {
            let p = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            for field in [Field::Geometry, Field::Color] {
                let got = t.query(p, field);
                let want = bilinear_oracle(&t, field, p);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
                }
            }
        }
    }

    #[test]
    fn latent_round_trip() {
        let t = random_triplane(4, 2, 5, 5);
        let lat = t.to_latent();
        assert_eq!(lat.shape(), &[12, 5, 5]);
        assert_eq!(t.with_latent(&lat).unwrap(), t);
        assert!(t.with_latent(&Tensor::zeros(&[12, 4, 5])).is_err());
    }

    #[test]
    fn concat_layout_for_six_channels() {
        let t = random_triplane(5, 6, 8, 8);
        let s = Skeleton::new(vec![[0.0; 3], [0.5, 0.5, 0.5]], vec![(0, 1)]).unwrap();
        let enc = encode_skeleton(&s, &WorldBounds::default(), 8, 8, RasterParams::for_resolution(8)).unwrap();
        let maps = expand_to_channels(&enc, 6).unwrap();
        let mut r = rng::seeded(6);
        let latent = Tensor::randn(&[36, 8, 8], &mut r);
        let stack = concat_condition(&latent, &t, &maps).unwrap();
        assert_eq!(stack.shape(), &[108, 8, 8]);
        let hw = 64;
        let c = 6;
        let init = t.to_latent();
        for p in 0..3 {
            let plane = &stack.data()[p * 36 * hw..][..36 * hw];
            assert_eq!(&plane[..2 * c * hw], &latent.data()[p * 12 * hw..][..12 * hw]);
            assert_eq!(&plane[2 * c * hw..4 * c * hw], &init.data()[p * 12 * hw..][..12 * hw]);
            assert_eq!(&plane[4 * c * hw..], &maps.data()[p * 12 * hw..][..12 * hw]);
        }
        // zero encoding leaves the latent and init channels untouched
        let zero = Tensor::zeros(&[3, 12, 8, 8]);
        let stack0 = concat_condition(&latent, &t, &zero).unwrap();
        for p in 0..3 {
            assert_eq!(&stack0.data()[p * 36 * hw..][..24 * hw], &stack.data()[p * 36 * hw..][..24 * hw]);
        }
        assert!(concat_condition(&latent, &t, &Tensor::zeros(&[3, 12, 4, 4])).is_err());
    }

    #[test]
    fn file_size_for_paper_resolution() {
        let t = Triplane::zeros(6, 128, 128, WorldBounds::default());
        assert_eq!(t.encode_file().len(), 2 * 3 * 6 * 128 * 128 * 4 + HEADER_BYTES);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = random_triplane(7, 2, 4, 4);
        let bytes = t.encode_file();
        assert_eq!(Triplane::decode_file(&bytes).unwrap(), t);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Triplane::decode_file(&bad), Err(crate::Error::Format(FormatError::BadMagic(_)))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Triplane::decode_file(&bad),
            Err(crate::Error::Format(FormatError::UnsupportedVersion(9)))
        ));
        let mut bad = bytes.clone();
        bad[8] = 5;
        assert!(matches!(Triplane::decode_file(&bad), Err(crate::Error::Format(FormatError::UnknownKind(5)))));
        assert!(matches!(
            Triplane::decode_file(&bytes[..bytes.len() - 1]),
            Err(crate::Error::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Triplane::decode_file(&bad), Err(crate::Error::Format(FormatError::TrailingBytes(1)))));
        let mut bad = bytes.clone();
        bad[HEADER_BYTES..HEADER_BYTES + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(Triplane::decode_file(&bad), Err(crate::Error::Format(FormatError::NonFinite))));
    }

    #[test]
    fn encoding_dump_is_marked() {
        let s = Skeleton::new(vec![[0.0; 3], [0.5, 0.5, 0.5]], vec![(0, 1)]).unwrap();
        let enc = encode_skeleton(&s, &WorldBounds::default(), 8, 8, RasterParams::for_resolution(8)).unwrap();
        let t = Triplane::from_encoding(&enc, 2, WorldBounds::default()).unwrap();
        assert_eq!(t.kind(), TriplaneKind::Encoding);
        let back = Triplane::decode_file(&t.encode_file()).unwrap();
        assert_eq!(back.kind(), TriplaneKind::Encoding);
        assert_eq!(back.plane_channel(Field::Color, PlaneId::Xz, 1)[..], enc.planes[1].index.iter().map(|&v| v as f32).collect::<Vec<_>>()[..]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn save_load_is_bitwise(seed in 0u64..1000, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
                let t = random_triplane(seed, c, h, w);
                let bytes = t.encode_file();
                let back = Triplane::decode_file(&bytes).unwrap();
                prop_assert_eq!(&back, &t);
                prop_assert_eq!(back.encode_file(), bytes);
            }

            #[test]
            fn query_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0,
                               p in proptest::array::uniform3(-1.0f64..1.0)) {
                let t1 = random_triplane(seed, 2, 6, 6);
                let t2 = random_triplane(seed + 1, 2, 6, 6);
                let q1 = t1.query(p, Field::Geometry);
                let q2 = t2.query(p, Field::Geometry);
                let mix: Vec<f32> = t1.geometry().iter().zip(t2.geometry())
                    .map(|(&x, &y)| (a * x as f64 + b * y as f64) as f32).collect();
                let t3 = Triplane::new(TriplaneKind::Avatar, 2, 6, 6, WorldBounds::default(), mix, t1.color().to_vec()).unwrap();
                let q3 = t3.query(p, Field::Geometry);
                for k in 0..2 {
                    // f32 storage of the mixed triplane bounds the error
                    prop_assert!((q3[k] - (a * q1[k] + b * q2[k])).abs() < 1e-5);
                }
            }
        }
    }
}
