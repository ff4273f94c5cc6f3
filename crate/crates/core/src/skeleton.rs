//! Skeletons, motion sequences and their plane-aligned conditioning maps.
//!
//! A skeleton is projected orthographically onto the XY, XZ and YZ planes of a
//! fixed world cube. Each projection is rasterized into an occupancy map
//! (joint discs and bone bands) and an index map carrying the normalized joint
//! index `i / (N - 1)` on joints and `(i + j) / (2 (N - 1))` on bones.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_data, Error, Result};
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];

/// One of the three axis-aligned feature planes. The order is fixed everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaneId {
    Xy,
    Xz,
    Yz,
}

impl PlaneId {
    pub const ALL: [PlaneId; 3] = [PlaneId::Xy, PlaneId::Xz, PlaneId::Yz];

    /// World axes kept by the projection: (column axis, row axis).
    pub fn axes(self) -> (usize, usize) {
        match self {
            PlaneId::Xy => (0, 1),
            PlaneId::Xz => (0, 2),
            PlaneId::Yz => (1, 2),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<PlaneId> {
        PlaneId::ALL
            .get(i)
            .copied()
            .ok_or_else(|| invalid_arg(format!("invalid plane id {}", i)))
    }
}

impl fmt::Display for PlaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PlaneId::Xy => "xy",
            PlaneId::Xz => "xz",
            PlaneId::Yz => "yz",
        };
        f.write_str(s)
    }
}

impl FromStr for PlaneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xy" => Ok(PlaneId::Xy),
            "xz" => Ok(PlaneId::Xz),
            "yz" => Ok(PlaneId::Yz),
            other => Err(invalid_arg(format!("invalid plane id {:?}", other))),
        }
    }
}

/// Axis-aligned world cube used as the projection domain of a whole sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for WorldBounds {
    fn default() -> Self {
        WorldBounds { min: [-1.0; 3], max: [1.0; 3] }
    }
}

impl WorldBounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = WorldBounds { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite()) || self.max[a] <= self.min[a] {
                return Err(invalid_arg(format!("invalid world bounds {:?}", self)));
            }
        }
        Ok(())
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn center(&self) -> Vec3 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn translated(&self, delta: Vec3) -> WorldBounds {
        WorldBounds {
            min: [self.min[0] + delta[0], self.min[1] + delta[1], self.min[2] + delta[2]],
            max: [self.max[0] + delta[0], self.max[1] + delta[1], self.max[2] + delta[2]],
        }
    }

    /// Continuous pixel coordinate `(u, v)` of a world point on `plane`.
    /// Row 0 sits at the maximum of the row axis. Not clamped.
    pub fn to_pixel(&self, plane: PlaneId, p: Vec3, height: usize, width: usize) -> [f64; 2] {
        let (a, b) = plane.axes();
        let u = (p[a] - self.min[a]) / self.extent(a) * width as f64;
        let v = (self.max[b] - p[b]) / self.extent(b) * height as f64;
        [u, v]
    }

    /// World coordinates (column axis, row axis) of a continuous pixel coordinate.
    pub fn from_pixel(&self, plane: PlaneId, uv: [f64; 2], height: usize, width: usize) -> [f64; 2] {
        let (a, b) = plane.axes();
        let x = self.min[a] + uv[0] / width as f64 * self.extent(a);
        let y = self.max[b] - uv[1] / height as f64 * self.extent(b);
        [x, y]
    }
}

/// Joints plus an undirected bone list with `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    joints: Vec<Vec3>,
    bones: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    joints: Vec<Vec3>,
    bones: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct MotionFile {
    bones: Vec<[usize; 2]>,
    frames: Vec<Vec<Vec3>>,
}

fn normalize_bones(n: usize, bones: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(bones.len());
    for &(a, b) in bones {
        if a >= n || b >= n {
            return Err(invalid_data(format!("bone ({}, {}) references a joint >= {}", a, b, n)));
        }
        if a == b {
            return Err(invalid_data(format!("self-loop bone ({}, {})", a, b)));
        }
        let bone = (a.min(b), a.max(b));
        if out.contains(&bone) {
            return Err(invalid_data(format!("duplicate bone {:?}", bone)));
        }
        out.push(bone);
    }
    Ok(out)
}

impl Skeleton {
    pub fn new(joints: Vec<Vec3>, bones: Vec<(usize, usize)>) -> Result<Self> {
        if joints.len() < 2 {
            return Err(invalid_data(format!("skeleton needs at least 2 joints, got {}", joints.len())));
        }
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid_data("non-finite joint coordinate"));
        }
        let bones = normalize_bones(joints.len(), &bones)?;
        Ok(Skeleton { joints, bones })
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn with_joints(&self, joints: Vec<Vec3>) -> Result<Skeleton> {
        if joints.len() != self.joints.len() {
            return Err(invalid_data("joint count changed"));
        }
        Skeleton::new(joints, self.bones.clone())
    }

    pub fn translated(&self, delta: Vec3) -> Skeleton {
        let joints = self
            .joints
            .iter()
            .map(|p| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]])
            .collect();
        Skeleton { joints, bones: self.bones.clone() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SkeletonFile = serde_json::from_str(text)?;
        Skeleton::new(f.joints, f.bones.into_iter().map(|[a, b]| (a, b)).collect())
    }

    pub fn to_json(&self) -> String {
        let f = SkeletonFile {
            joints: self.joints.clone(),
            bones: self.bones.iter().map(|&(a, b)| [a, b]).collect(),
        };
        serde_json::to_string(&f).expect("skeleton serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Skeleton::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Ordered frames sharing one bone topology.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Vec<Skeleton>,
}

impl MotionSequence {
    pub fn new(frames: Vec<Skeleton>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid_data("motion needs at least one frame"))?;
        for (t, f) in frames.iter().enumerate() {
            if f.num_joints() != first.num_joints() || f.bones() != first.bones() {
                return Err(invalid_data(format!("frame {} has a different topology", t)));
            }
        }
        Ok(MotionSequence { frames })
    }

    pub fn frames(&self) -> &[Skeleton] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        self.frames[0].bones()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: MotionFile = serde_json::from_str(text)?;
        let bones: Vec<(usize, usize)> = f.bones.into_iter().map(|[a, b]| (a, b)).collect();
        let frames = f
            .frames
            .into_iter()
            .map(|joints| Skeleton::new(joints, bones.clone()))
            .collect::<Result<Vec<_>>>()?;
        MotionSequence::new(frames)
    }

    pub fn to_json(&self) -> String {
        let f = MotionFile {
            bones: self.bones().iter().map(|&(a, b)| [a, b]).collect(),
            frames: self.frames.iter().map(|s| s.joints.clone()).collect(),
        };
        serde_json::to_string(&f).expect("motion serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        MotionSequence::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

pub fn project(
    skeleton: &Skeleton,
    plane: PlaneId,
    bounds: &WorldBounds,
    height: usize,
    width: usize,
) -> Result<Vec<[f64; 2]>> {
    bounds.validate()?;
    if height < 2 || width < 2 {
        return Err(invalid_arg(format!("grid {}x{} too small", height, width)));
    }
    Ok(skeleton.joints().iter().map(|&p| bounds.to_pixel(plane, p, height, width)).collect())
}

/// Stroke sizes of the rasterized skeleton, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterParams {
    pub joint_radius_px: f64,
    pub bone_halfwidth_px: f64,
}

impl RasterParams {
    pub fn for_resolution(height: usize) -> Self {
        RasterParams {
            joint_radius_px: (height as f64 / 64.0).max(1.0),
            bone_halfwidth_px: (height as f64 / 128.0).max(0.5),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.joint_radius_px >= 0.5) || !(self.bone_halfwidth_px >= 0.5) {
            return Err(invalid_arg(format!("stroke sizes below half a pixel: {:?}", self)));
        }
        Ok(())
    }
}

/// Occupancy and index maps of one plane, row-major `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneEncoding {
    pub occupancy: Vec<u8>,
    pub index: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonEncoding {
    pub height: usize,
    pub width: usize,
    /// Ordered XY, XZ, YZ.
    pub planes: [PlaneEncoding; 3],
}

pub(crate) fn segment_distance_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    cx * cx + cy * cy
}

/// Pixel index range whose centers may lie within `[lo, hi]` (continuous coordinates).
fn center_range(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(n as f64 - 1.0);
    if !(first <= last) {
        return None;
    }
    Some((first as usize, last as usize))
}

pub fn rasterize_encoding(
    skeleton: &Skeleton,
    plane: PlaneId,
    bounds: &WorldBounds,
    height: usize,
    width: usize,
    params: RasterParams,
) -> Result<PlaneEncoding> {
    params.validate()?;
    let pts = project(skeleton, plane, bounds, height, width)?;
    let denom = (skeleton.num_joints() - 1) as f64;
    let mut occupancy = vec![0u8; height * width];
    let mut index = vec![0.0f64; height * width];

    // Joints first, in increasing index, so the smallest index claims a pixel.
    let r = params.joint_radius_px;
    for (i, p) in pts.iter().enumerate() {
        let (Some((r0, r1)), Some((c0, c1))) =
            (center_range(p[1] - r, p[1] + r, height), center_range(p[0] - r, p[0] + r, width))
        else {
            continue;
        };
        let value = i as f64 / denom;
        for row in r0..=r1 {
            let dy = row as f64 + 0.5 - p[1];
            for col in c0..=c1 {
                let k = row * width + col;
                if occupancy[k] != 0 {
                    continue;
                }
                let dx = col as f64 + 0.5 - p[0];
                if dx * dx + dy * dy <= r * r {
                    occupancy[k] = 1;
                    index[k] = value;
                }
            }
        }
    }

    let mut bones = skeleton.bones().to_vec();
    bones.sort_by_key(|&(i, j)| (i + j, i));
    let hw = params.bone_halfwidth_px;
    for (i, j) in bones {
        let (a, b) = (pts[i], pts[j]);
        let rows = center_range(a[1].min(b[1]) - hw, a[1].max(b[1]) + hw, height);
        let cols = center_range(a[0].min(b[0]) - hw, a[0].max(b[0]) + hw, width);
        let (Some((r0, r1)), Some((c0, c1))) = (rows, cols) else {
            continue;
        };
        let value = (i + j) as f64 / (2.0 * denom);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let k = row * width + col;
                if occupancy[k] != 0 {
                    continue;
                }
                let c = [col as f64 + 0.5, row as f64 + 0.5];
                if segment_distance_sq(c, a, b) <= hw * hw {
                    occupancy[k] = 1;
                    index[k] = value;
                }
            }
        }
    }
    Ok(PlaneEncoding { occupancy, index })
}

pub fn encode_skeleton(
    skeleton: &Skeleton,
    bounds: &WorldBounds,
    height: usize,
    width: usize,
    params: RasterParams,
) -> Result<SkeletonEncoding> {
    let planes = [
        rasterize_encoding(skeleton, PlaneId::Xy, bounds, height, width, params)?,
        rasterize_encoding(skeleton, PlaneId::Xz, bounds, height, width, params)?,
        rasterize_encoding(skeleton, PlaneId::Yz, bounds, height, width, params)?,
    ];
    Ok(SkeletonEncoding { height, width, planes })
}

/// Gaussian joint heatmaps, one real map per plane, no bone term.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapEncoding {
    pub height: usize,
    pub width: usize,
    pub planes: [Vec<f64>; 3],
}

pub fn encode_skeleton_heatmap(
    skeleton: &Skeleton,
    bounds: &WorldBounds,
    height: usize,
    width: usize,
    sigma_px: f64,
) -> Result<HeatmapEncoding> {
    if !(sigma_px > 0.0) || !sigma_px.is_finite() {
        return Err(invalid_arg(format!("heatmap sigma must be positive, got {}", sigma_px)));
    }
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let mut planes: [Vec<f64>; 3] = Default::default();
    for plane in PlaneId::ALL {
        let pts = project(skeleton, plane, bounds, height, width)?;
        let mut map = vec![0.0f64; height * width];
        for row in 0..height {
            for col in 0..width {
                let (cx, cy) = (col as f64 + 0.5, row as f64 + 0.5);
                let best = pts.iter().fold(0.0f64, |m, p| {
                    let d2 = (cx - p[0]).powi(2) + (cy - p[1]).powi(2);
                    m.max((-d2 * inv).exp())
                });
                map[row * width + col] = best;
            }
        }
        planes[plane.index()] = map;
    }
    Ok(HeatmapEncoding { height, width, planes })
}

/// Repeat occupancy and index maps `c` times each: `[3, 2c, H, W]`, occupancy block first.
pub fn expand_to_channels(enc: &SkeletonEncoding, c: usize) -> Result<Tensor> {
    if c == 0 {
        return Err(invalid_arg("channel count must be at least 1"));
    }
    let hw = enc.height * enc.width;
    let mut out = Tensor::zeros(&[3, 2 * c, enc.height, enc.width]);
    let data = out.data_mut();
    for (p, plane) in enc.planes.iter().enumerate() {
        for k in 0..c {
            let occ = &mut data[(p * 2 * c + k) * hw..][..hw];
            for (dst, &o) in occ.iter_mut().zip(&plane.occupancy) {
                *dst = o as f64;
            }
            let idx = &mut data[(p * 2 * c + c + k) * hw..][..hw];
            idx.copy_from_slice(&plane.index);
        }
    }
    Ok(out)
}

/// Repeat each plane's heatmap across all `2c` condition channels.
pub fn expand_heatmap_to_channels(enc: &HeatmapEncoding, c: usize) -> Result<Tensor> {
    if c == 0 {
        return Err(invalid_arg("channel count must be at least 1"));
    }
    let hw = enc.height * enc.width;
    let mut out = Tensor::zeros(&[3, 2 * c, enc.height, enc.width]);
    let data = out.data_mut();
    for (p, map) in enc.planes.iter().enumerate() {
        for k in 0..2 * c {
            data[(p * 2 * c + k) * hw..][..hw].copy_from_slice(map);
        }
    }
    Ok(out)
}

/// Which skeleton encoding feeds the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    #[default]
    Index,
    Heatmap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    #[serde(default)]
    pub kind: EncodingKind,
    /// Stroke sizes; derived from the resolution when absent.
    #[serde(default)]
    pub raster: Option<RasterParams>,
    #[serde(default = "default_sigma")]
    pub heatmap_sigma_px: f64,
}

fn default_sigma() -> f64 {
    1.5
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { kind: EncodingKind::Index, raster: None, heatmap_sigma_px: default_sigma() }
    }
}

impl EncodingConfig {
    pub fn raster_params(&self, height: usize) -> RasterParams {
        self.raster.unwrap_or_else(|| RasterParams::for_resolution(height))
    }

    /// Expanded conditioning maps `[3, 2c, H, W]` for the configured encoding.
    pub fn condition_maps(
        &self,
        skeleton: &Skeleton,
        bounds: &WorldBounds,
        height: usize,
        width: usize,
        c: usize,
    ) -> Result<Tensor> {
        match self.kind {
            EncodingKind::Index => {
                let enc = encode_skeleton(skeleton, bounds, height, width, self.raster_params(height))?;
                expand_to_channels(&enc, c)
            }
            EncodingKind::Heatmap => {
                let enc = encode_skeleton_heatmap(skeleton, bounds, height, width, self.heatmap_sigma_px)?;
                expand_heatmap_to_channels(&enc, c)
            }
        }
    }
}
