//! Procedural capsule characters with analytically known triplanes, posed by
//! forward kinematics, plus dataset and motion generation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_data, FormatError, Result};
use crate::rng::{self, derive_seed, Rng};
use crate::skeleton::{encode_skeleton, MotionSequence, PlaneId, RasterParams, Skeleton, SkeletonEncoding, Vec3, WorldBounds};
use crate::triplane::{Triplane, TriplaneKind};

/// Joints must stay inside this cube after posing.
pub const POSE_LIMIT: f64 = 0.95;
pub const RADIUS_RANGE: (f64, f64) = (0.03, 0.08);
pub const DEFAULT_FRAMES: usize = 14;

/// Pelvis, spine, chest, head, left arm (shoulder, elbow, wrist), right arm,
/// left leg (hip, knee, ankle), right leg.
pub const HUMANOID_BONES: [(usize, usize); 15] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (2, 4),
    (4, 5),
    (5, 6),
    (2, 7),
    (7, 8),
    (8, 9),
    (0, 10),
    (10, 11),
    (11, 12),
    (0, 13),
    (13, 14),
    (14, 15),
];

/// Tree skeleton whose bones are capsules. Every bone `(i, j)` has `i < j`,
/// `i` being the parent joint; joint 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleCharacter {
    pub id: u64,
    pub skeleton: Skeleton,
    pub radii: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl CapsuleCharacter {
    pub fn new(id: u64, skeleton: Skeleton, radii: Vec<f64>, colors: Vec<[f64; 3]>) -> Result<Self> {
        let n = skeleton.num_joints();
        let bones = skeleton.bones();
        if bones.len() != n - 1 || radii.len() != bones.len() || colors.len() != bones.len() {
            return Err(invalid_data("a capsule character needs N-1 bones with one radius and color each"));
        }
        let mut has_parent = vec![false; n];
        for &(_, j) in bones {
            if has_parent[j] {
                return Err(invalid_data(format!("joint {} has two parents", j)));
            }
            has_parent[j] = true;
        }
        if has_parent[0] {
            return Err(invalid_data("joint 0 must be the root"));
        }
        if radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(invalid_data("bone radii must be positive"));
        }
        if colors.iter().flatten().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(invalid_data("bone colors must lie in [0, 1]"));
        }
        Ok(CapsuleCharacter { id, skeleton, radii, colors })
    }

    pub fn num_bones(&self) -> usize {
        self.radii.len()
    }

    pub fn is_humanoid(&self) -> bool {
        self.skeleton.bones() == HUMANOID_BONES
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m).clamp(0.0, 1.0), (g + m).clamp(0.0, 1.0), (b + m).clamp(0.0, 1.0)]
}

fn humanoid_rest(rng: &mut Rng) -> Vec<Vec3> {
    let torso = rng.gen_range(0.9..1.1);
    let arm = rng.gen_range(0.85..1.1);
    let leg = rng.gen_range(0.85..1.1);
    let shoulder = rng.gen_range(0.12..0.18);
    let hip = rng.gen_range(0.08..0.12);
    let (spine, chest, head) = (0.2 * torso, 0.4 * torso, 0.62 * torso);
    let (upper, fore) = (0.25 * arm, 0.24 * arm);
    let (thigh, shin) = (0.36 * leg, 0.34 * leg);
    let top = -0.08;
    vec![
        [0.0, 0.0, 0.0],
        [0.0, spine, 0.0],
        [0.0, chest, 0.0],
        [0.0, head, 0.0],
        [shoulder, chest, 0.0],
        [shoulder + upper, chest, 0.0],
        [shoulder + upper + fore, chest, 0.0],
        [-shoulder, chest, 0.0],
        [-shoulder - upper, chest, 0.0],
        [-shoulder - upper - fore, chest, 0.0],
        [hip, top, 0.0],
        [hip, top - thigh, 0.0],
        [hip, top - thigh - shin, 0.0],
        [-hip, top, 0.0],
        [-hip, top - thigh, 0.0],
        [-hip, top - thigh - shin, 0.0],
    ]
}

fn random_tree(rng: &mut Rng, n: usize) -> (Vec<Vec3>, Vec<(usize, usize)>) {
    let mut joints: Vec<Vec3> = vec![[0.0; 3]];
    let mut bones = Vec::with_capacity(n - 1);
    for j in 1..n {
        loop {
            let parent = rng.gen_range(0..j);
            let dir = random_unit(rng);
            let len = rng.gen_range(0.15..0.3);
            let p = joints[parent];
            let q = [p[0] + len * dir[0], p[1] + len * dir[1], p[2] + len * dir[2]];
            if q.iter().all(|v| v.abs() <= 0.8) {
                joints.push(q);
                bones.push((parent, j));
                break;
            }
        }
    }
    (joints, bones)
}

fn random_unit(rng: &mut Rng) -> Vec3 {
    loop {
        let v = [rng::normal(rng), rng::normal(rng), rng::normal(rng)];
        let n = norm(v);
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Humanoid T-pose for `n_joints == 16`, otherwise a random tree rooted at the origin.
pub fn make_character(rng: &mut Rng, n_joints: usize) -> Result<CapsuleCharacter> {
    if n_joints < 2 {
        return Err(invalid_arg(format!("a character needs at least 2 joints, got {}", n_joints)));
    }
    let (joints, bones) = if n_joints == 16 { (humanoid_rest(rng), HUMANOID_BONES.to_vec()) } else { random_tree(rng, n_joints) };
    let nb = bones.len();
    let radii = (0..nb).map(|_| rng.gen_range(RADIUS_RANGE.0..RADIUS_RANGE.1)).collect();
    let hue0: f64 = rng.gen();
    let colors = (0..nb)
        .map(|b| hsv(hue0 + b as f64 / nb as f64, rng.gen_range(0.55..0.95), rng.gen_range(0.6..1.0)))
        .collect();
    CapsuleCharacter::new(0, Skeleton::new(joints, bones)?, radii, colors)
}

pub type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rodrigues rotation for an axis-angle vector (direction = axis, norm = angle).
pub fn rotation_matrix(aa: Vec3) -> Mat3 {
    let theta = norm(aa);
    if theta == 0.0 {
        return IDENTITY;
    }
    let [x, y, z] = [aa[0] / theta, aa[1] / theta, aa[2] / theta];
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Forward kinematics: bone `b` rotates its subtree about its parent joint by
/// the axis-angle `angles[b]`, composed with all ancestor rotations.
pub fn pose_character(ch: &CapsuleCharacter, angles: &[Vec3]) -> Result<Skeleton> {
    let bones = ch.skeleton.bones();
    if angles.len() != bones.len() {
        return Err(invalid_arg(format!("expected {} bone rotations, got {}", bones.len(), angles.len())));
    }
    if angles.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid_arg("non-finite bone rotation"));
    }
    let rest = ch.skeleton.joints();
    let n = rest.len();
    let mut order: Vec<usize> = (0..bones.len()).collect();
    order.sort_by_key(|&b| bones[b].1);
    let mut rot = vec![IDENTITY; n];
    let mut untouched = vec![true; n];
    let mut pos = rest.to_vec();
    for b in order {
        let (i, j) = bones[b];
        untouched[j] = untouched[i] && angles[b] == [0.0; 3];
        if untouched[j] {
            continue;
        }
        rot[j] = matmul(&rot[i], &rotation_matrix(angles[b]));
        let off = apply(&rot[j], sub(rest[j], rest[i]));
        pos[j] = [pos[i][0] + off[0], pos[i][1] + off[1], pos[i][2] + off[2]];
    }
    ch.skeleton.with_joints(pos)
}

/// Largest rotation magnitude per bone when sampling training poses.
fn angle_limit(ch: &CapsuleCharacter, bone: usize, max_angle: f64) -> f64 {
    if ch.is_humanoid() && matches!(bone, 0 | 1 | 2 | 3 | 6 | 9 | 12) {
        0.35 * max_angle
    } else {
        max_angle
    }
}

/// Random axis-angle per bone with bounded magnitude; resampled until every
/// joint stays inside `[-POSE_LIMIT, POSE_LIMIT]^3`.
pub fn sample_pose(ch: &CapsuleCharacter, rng: &mut Rng, max_angle: f64) -> Result<Vec<Vec3>> {
    let mut scale = 1.0;
    for attempt in 0.. {
        if attempt > 0 && attempt % 50 == 0 {
            scale *= 0.5;
        }
        let angles: Vec<Vec3> = (0..ch.num_bones())
            .map(|b| {
                let axis = random_unit(rng);
                let a = scale * angle_limit(ch, b, max_angle) * rng.gen::<f64>();
                [a * axis[0], a * axis[1], a * axis[2]]
            })
            .collect();
        let posed = pose_character(ch, &angles)?;
        if posed.joints().iter().flatten().all(|v| v.abs() <= POSE_LIMIT) {
            return Ok(angles);
        }
    }
    unreachable!()
}

fn project_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    ((ex * ex + ey * ey).sqrt(), t)
}

/// Smoothing band of the occupancy channel: two pixels in world units.
pub fn band_width(bounds: &WorldBounds, plane: PlaneId, height: usize, width: usize) -> f64 {
    let (a, b) = plane.axes();
    bounds.extent(a) / width as f64 + bounds.extent(b) / height as f64
}

/// Geometry channel `k >= 1` of the positional recipe: `g0 * sin(f pi s)` for
/// odd `k`, `g0 * cos(f pi s)` for even `k`, with `f = (k + 1) / 2` (integer).
pub fn positional_feature(k: usize, g0: f64, s: f64) -> f64 {
    let f = ((k + 1) / 2) as f64;
    if k % 2 == 1 {
        g0 * (f * std::f64::consts::PI * s).sin()
    } else {
        g0 * (f * std::f64::consts::PI * s).cos()
    }
}

/// Analytic triplane of a posed capsule character. For each plane pixel the
/// nearest projected capsule gives `g0 = clamp(1 - d / tau)`, positional
/// channels along the bone, and the bone color where `g0 > 0`.
pub fn ground_truth_triplane(
    ch: &CapsuleCharacter,
    posed: &Skeleton,
    c: usize,
    height: usize,
    width: usize,
    bounds: WorldBounds,
) -> Result<Triplane> {
    if c < 4 {
        return Err(invalid_arg(format!("ground-truth triplanes need at least 4 channels, got {}", c)));
    }
    if posed.bones() != ch.skeleton.bones() {
        return Err(invalid_arg("posed skeleton does not match the character topology"));
    }
    bounds.validate()?;
    let hw = height * width;
    let mut geometry = vec![0f32; 3 * c * hw];
    let mut color = vec![0f32; 3 * c * hw];
    let joints = posed.joints();
    for plane in PlaneId::ALL {
        let (a, b) = plane.axes();
        let tau = band_width(&bounds, plane, height, width);
        let segs: Vec<([f64; 2], [f64; 2])> =
            posed.bones().iter().map(|&(i, j)| ([joints[i][a], joints[i][b]], [joints[j][a], joints[j][b]])).collect();
        let base = plane.index() * c * hw;
        for row in 0..height {
            for col in 0..width {
                let p = bounds.from_pixel(plane, [col as f64 + 0.5, row as f64 + 0.5], height, width);
                let mut best = (f64::INFINITY, 0usize, 0.0);
                for (k, &(s0, s1)) in segs.iter().enumerate() {
                    let (dist, t) = project_segment(p, s0, s1);
                    let d = dist - ch.radii[k];
                    if d < best.0 {
                        best = (d, k, t);
                    }
                }
                let (d, bone, s) = best;
                let g0 = (1.0 - d / tau).clamp(0.0, 1.0);
                if g0 <= 0.0 {
                    continue;
                }
                let px = row * width + col;
                geometry[base + px] = g0 as f32;
                for k in 1..c {
                    geometry[base + k * hw + px] = positional_feature(k, g0, s) as f32;
                }
                for k in 0..3 {
                    color[base + k * hw + px] = ch.colors[bone][k] as f32;
                }
            }
        }
    }
    Triplane::new(TriplaneKind::Avatar, c, height, width, bounds, geometry, color)
}

/// Distance from a point to the nearest capsule surface (negative inside).
pub fn capsule_distance(ch: &CapsuleCharacter, posed: &Skeleton, p: Vec3) -> (f64, usize) {
    let joints = posed.joints();
    let mut best = (f64::INFINITY, 0);
    for (k, &(i, j)) in posed.bones().iter().enumerate() {
        let (a, b) = (joints[i], joints[j]);
        let ab = sub(b, a);
        let ap = sub(p, a);
        let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
        let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let d = norm([ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]]) - ch.radii[k];
        if d < best.0 {
            best = (d, k);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub characters: usize,
    pub poses: usize,
    #[serde(default = "default_joints")]
    pub joints: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    #[serde(default)]
    pub bounds: WorldBounds,
    #[serde(default = "default_max_angle")]
    pub max_angle: f64,
}

fn default_joints() -> usize {
    16
}

fn default_max_angle() -> f64 {
    0.8
}

impl DatasetParams {
    /// 4 humanoids x 8 poses, `C = 4`, 32x32.
    pub fn desk() -> Self {
        DatasetParams {
            characters: 4,
            poses: 8,
            joints: 16,
            channels: 4,
            height: 32,
            width: 32,
            seed: 0,
            bounds: WorldBounds::default(),
            max_angle: default_max_angle(),
        }
    }

    pub fn sample_count(&self) -> usize {
        self.characters * self.poses
    }

    pub fn validate(&self) -> Result<()> {
        if self.characters == 0 || self.poses == 0 {
            return Err(invalid_arg("characters and poses must be at least 1"));
        }
        if self.channels < 4 || self.height < 2 || self.width < 2 || self.joints < 2 {
            return Err(invalid_arg("need C >= 4, a grid of at least 2x2 and 2 joints"));
        }
        if !(self.max_angle >= 0.0 && self.max_angle.is_finite()) {
            return Err(invalid_arg("max_angle must be finite and non-negative"));
        }
        self.bounds.validate()
    }

    pub fn character(&self, id: usize) -> Result<CapsuleCharacter> {
        let mut r = rng::stream(self.seed, id as u64);
        let mut ch = make_character(&mut r, self.joints)?;
        ch.id = id as u64;
        Ok(ch)
    }

    /// Pose 0 is the rest pose; later ids are seeded random poses, so ids
    /// beyond `poses` act as held-out poses of the same distribution.
    pub fn pose_angles(&self, ch: &CapsuleCharacter, pose: usize) -> Result<Vec<Vec3>> {
        if pose == 0 {
            return Ok(vec![[0.0; 3]; ch.num_bones()]);
        }
        let mut r = rng::stream(derive_seed(self.seed, 0x706f_7365 + ch.id), pose as u64);
        sample_pose(ch, &mut r, self.max_angle)
    }

    pub fn sample(&self, ch: &CapsuleCharacter, init: &Triplane, pose: usize) -> Result<DatasetSample> {
        let skeleton = pose_character(ch, &self.pose_angles(ch, pose)?)?;
        let target = ground_truth_triplane(ch, &skeleton, self.channels, self.height, self.width, self.bounds)?;
        let encoding = encode_skeleton(&skeleton, &self.bounds, self.height, self.width, RasterParams::for_resolution(self.height))?;
        Ok(DatasetSample { character: ch.id as usize, pose, init: init.clone(), target, skeleton, encoding })
    }

    pub fn init_triplane(&self, ch: &CapsuleCharacter) -> Result<Triplane> {
        ground_truth_triplane(ch, &ch.skeleton, self.channels, self.height, self.width, self.bounds)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub character: usize,
    pub pose: usize,
    /// Rest-pose triplane of the character.
    pub init: Triplane,
    pub target: Triplane,
    pub skeleton: Skeleton,
    pub encoding: SkeletonEncoding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: DatasetParams,
    pub samples: Vec<DatasetSample>,
}

pub const DATASET_FORMAT: &str = "tridiff-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub character: usize,
    pub pose: usize,
    pub init: String,
    pub target: String,
    pub skeleton: String,
    pub encoding: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanges {
    pub geometry: [f32; 2],
    pub color: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub params: DatasetParams,
    pub samples: Vec<SampleEntry>,
    pub feature_ranges: FeatureRanges,
}

pub fn make_dataset(params: &DatasetParams) -> Result<Dataset> {
    params.validate()?;
    let mut samples = Vec::with_capacity(params.sample_count());
    for c in 0..params.characters {
        let ch = params.character(c)?;
        let init = params.init_triplane(&ch)?;
        for p in 0..params.poses {
            samples.push(params.sample(&ch, &init, p)?);
        }
    }
    Ok(Dataset { params: params.clone(), samples })
}

fn range(values: impl Iterator<Item = f32>) -> [f32; 2] {
    values.fold([f32::INFINITY, f32::NEG_INFINITY], |[lo, hi], v| [lo.min(v), hi.max(v)])
}

impl Dataset {
    pub fn feature_ranges(&self) -> FeatureRanges {
        let all = || self.samples.iter().flat_map(|s| [&s.init, &s.target]);
        FeatureRanges {
            geometry: range(all().flat_map(|t| t.geometry().iter().copied())),
            color: range(all().flat_map(|t| t.color().iter().copied())),
        }
    }

    /// Writes one directory per character plus `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.samples.len());
        let mut written_init = std::collections::BTreeSet::new();
        for s in &self.samples {
            let cdir = format!("char_{:04}", s.character);
            fs::create_dir_all(dir.join(&cdir))?;
            let e = SampleEntry {
                character: s.character,
                pose: s.pose,
                init: format!("{}/init.trpl", cdir),
                target: format!("{}/pose_{:03}.trpl", cdir, s.pose),
                skeleton: format!("{}/pose_{:03}.json", cdir, s.pose),
                encoding: format!("{}/pose_{:03}.enc.trpl", cdir, s.pose),
            };
            if written_init.insert(s.character) {
                s.init.save(&dir.join(&e.init))?;
            }
            s.target.save(&dir.join(&e.target))?;
            s.skeleton.save(&dir.join(&e.skeleton))?;
            Triplane::from_encoding(&s.encoding, 1, self.params.bounds)?.save(&dir.join(&e.encoding))?;
            entries.push(e);
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed: self.params.seed,
            params: self.params.clone(),
            samples: entries,
            feature_ranges: self.feature_ranges(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| FormatError::Manifest(e.to_string()))?;
        if m.format != DATASET_FORMAT {
            return Err(FormatError::Manifest(format!("unexpected format '{}'", m.format)).into());
        }
        if m.version != DATASET_VERSION {
            return Err(FormatError::UnsupportedVersion(m.version).into());
        }
        let p = &m.params;
        let mut samples = Vec::with_capacity(m.samples.len());
        for e in &m.samples {
            let init = Triplane::load(&dir.join(&e.init))?;
            let target = Triplane::load(&dir.join(&e.target))?;
            for t in [&init, &target] {
                if (t.channels(), t.height(), t.width()) != (p.channels, p.height, p.width) || *t.bounds() != p.bounds {
                    return Err(invalid_data(format!("{} does not match the manifest layout", e.target)));
                }
            }
            let skeleton = Skeleton::load(&dir.join(&e.skeleton))?;
            // the skeleton is authoritative; the stored encoding must agree with it
            let encoding = encode_skeleton(&skeleton, &p.bounds, p.height, p.width, RasterParams::for_resolution(p.height))?;
            let stored = Triplane::load(&dir.join(&e.encoding))?;
            if stored != Triplane::from_encoding(&encoding, 1, p.bounds)? {
                return Err(invalid_data(format!("{} disagrees with {}", e.encoding, e.skeleton)));
            }
            samples.push(DatasetSample { character: e.character, pose: e.pose, init, target, skeleton, encoding });
        }
        Ok(Dataset { params: m.params, samples })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionStyle {
    Walk,
    Wave,
    Spin,
}

impl fmt::Display for MotionStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionStyle::Walk => "walk",
            MotionStyle::Wave => "wave",
            MotionStyle::Spin => "spin",
        })
    }
}

impl FromStr for MotionStyle {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk" => Ok(MotionStyle::Walk),
            "wave" => Ok(MotionStyle::Wave),
            "spin" => Ok(MotionStyle::Spin),
            _ => Err(invalid_arg(format!("unknown motion style '{}'", s))),
        }
    }
}

/// Bone rotations of frame `k`. Every trajectory is a combination of
/// `sin(w k)` and `1 - cos(w k)` terms, so frame 0 is the rest pose.
fn motion_frame(ch: &CapsuleCharacter, style: MotionStyle, amp: f64, axes: &[Vec3], k: usize) -> Vec<Vec3> {
    let w = 2.0 * std::f64::consts::PI / DEFAULT_FRAMES as f64;
    let phase = w * k as f64;
    let (s, c1) = (phase.sin(), 1.0 - phase.cos());
    let mut a = vec![[0.0; 3]; ch.num_bones()];
    if ch.is_humanoid() {
        match style {
            MotionStyle::Walk => {
                a[10] = [0.6 * amp * s, 0.0, 0.0];
                a[13] = [-0.6 * amp * s, 0.0, 0.0];
                a[11] = [-0.4 * amp * c1, 0.0, 0.0];
                a[14] = [-0.4 * amp * (1.0 - (2.0 * phase).cos()) * 0.5, 0.0, 0.0];
                a[4] = [0.0, 0.5 * amp * s, 0.0];
                a[7] = [0.0, 0.5 * amp * s, 0.0];
            }
            MotionStyle::Wave => {
                a[7] = [0.0, 0.0, -0.6 * amp * c1];
                a[8] = [0.0, 0.0, -0.5 * amp * (2.0 * phase).sin()];
            }
            MotionStyle::Spin => {
                for b in [0, 9, 12] {
                    a[b] = [0.0, phase, 0.0];
                }
            }
        }
    } else {
        for (b, axis) in axes.iter().enumerate() {
            let ang = match style {
                MotionStyle::Walk => 0.4 * amp * s,
                MotionStyle::Wave => 0.3 * amp * c1,
                MotionStyle::Spin if ch.skeleton.bones()[b].0 == 0 => phase,
                MotionStyle::Spin => 0.0,
            };
            let axis = if style == MotionStyle::Spin { [0.0, 1.0, 0.0] } else { *axis };
            a[b] = [ang * axis[0], ang * axis[1], ang * axis[2]];
        }
    }
    a
}

/// `k` frames of a periodic motion (period of [`DEFAULT_FRAMES`] frames).
pub fn make_motion(ch: &CapsuleCharacter, k: usize, style: MotionStyle, seed: u64) -> Result<MotionSequence> {
    if k == 0 {
        return Err(invalid_arg("a motion needs at least one frame"));
    }
    let mut r = rng::seeded(derive_seed(seed, ch.id));
    let amp = r.gen_range(0.8..1.2);
    let axes: Vec<Vec3> = (0..ch.num_bones()).map(|_| random_unit(&mut r)).collect();
    let frames = (0..k)
        .map(|f| pose_character(ch, &motion_frame(ch, style, amp, &axes, f)))
        .collect::<Result<Vec<_>>>()?;
    MotionSequence::new(frames)
}
