//! Seeded synthetic people: stick-figure walkers with per-identity body
//! proportions, gait and outfit colours, rendered into every modality.
//!
//! Frame containers (`SHRCDAT1`) are little-endian: the 8-byte magic, `u32`
//! frame count, `u32` height, `u32` width, then for each frame four sections
//! `u8 code`, `u32 value count`, f32 values:
//!
//! | code | content                          | values    |
//! |------|----------------------------------|-----------|
//! | 1    | silhouette mask (0 or 1)         | `H·W`     |
//! | 2    | RGB crop, channels innermost     | `H·W·3`   |
//! | 3    | body-model parameters            | 85        |
//! | 4    | joints `x0, y0, …`, confidences  | 51        |

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{derive_seed, SilhouetteInput, SkeletonFrame, SmplParams, COCO_JOINTS, SMPL_POSE_DIM, SMPL_SHAPE_DIM};
use crate::error::{Error, Result};
use crate::gallery::{read_manifest, resolve_frames_path, write_manifest, Frame, ManifestRow, TrackletRecord};
use crate::io::{LeReader, LeWriter};
use crate::math::{FeatureGrid, Matrix};
use crate::scalar::Real;

pub const CONTAINER_MAGIC: &[u8; 8] = b"SHRCDAT1";
const SECTION_MASK: u8 = 1;
const SECTION_RGB: u8 = 2;
const SECTION_SMPL: u8 = 3;
const SECTION_SKELETON: u8 = 4;
const BACKGROUND: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_ids: usize,
    pub tracklets_per_id: usize,
    pub frames_per_tracklet: usize,
    /// Outfits per identity; tracklet `j` wears outfit `j mod clothing_variants`.
    pub clothing_variants: usize,
    /// Probability of flipping each silhouette pixel.
    pub flip_rate: f64,
    /// Standard deviation of keypoint noise, in crop heights.
    pub keypoint_jitter: f64,
    /// Magnitude of per-outfit colour and thickness changes.
    pub clothing_shift: f64,
    /// Standard deviation of per-frame body-shape estimation noise.
    pub shape_noise: f64,
    /// Standard deviation of per-pixel RGB noise.
    pub pixel_noise: f64,
    /// Fraction of a gait cycle by which a tracklet's start phase is randomized.
    pub phase_jitter: f64,
    /// Standard deviation of a per-tracklet camera gain and colour cast.
    pub illumination: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_ids: 50,
            tracklets_per_id: 4,
            frames_per_tracklet: 24,
            clothing_variants: 2,
            flip_rate: 0.02,
            keypoint_jitter: 0.01,
            clothing_shift: 0.3,
            shape_noise: 0.1,
            pixel_noise: 0.03,
            phase_jitter: 1.0,
            illumination: 0.0,
            height: 32,
            width: 16,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidInput(format!("dataset.{field}: {why}")));
        for (name, v) in [
            ("num_ids", self.num_ids),
            ("tracklets_per_id", self.tracklets_per_id),
            ("frames_per_tracklet", self.frames_per_tracklet),
            ("clothing_variants", self.clothing_variants),
        ] {
            if v == 0 {
                return bad(name, "must be at least 1");
            }
        }
        if self.height < 8 || self.width < 4 {
            return bad("height", "crops must be at least 8×4");
        }
        for (name, v) in [("flip_rate", self.flip_rate), ("phase_jitter", self.phase_jitter)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(name, "must lie in [0, 1]");
            }
        }
        for (name, v) in [
            ("keypoint_jitter", self.keypoint_jitter),
            ("clothing_shift", self.clothing_shift),
            ("shape_noise", self.shape_noise),
            ("pixel_noise", self.pixel_noise),
            ("illumination", self.illumination),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(name, "must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn tracklet_count(&self) -> usize {
        self.num_ids * self.tracklets_per_id
    }
}

pub fn subject_id(index: usize) -> String {
    format!("id{index:04}")
}

pub fn tracklet_id(subject: usize, tracklet: usize) -> String {
    format!("id{subject:04}_t{tracklet:02}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaitParams {
    /// Frames per stride cycle.
    pub period: f64,
    /// Peak thigh swing in radians.
    pub stride: f64,
    pub knee_bend: f64,
    pub arm_swing: f64,
    pub phase: f64,
}

/// Everything that makes one synthetic subject recognizable.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityProfile {
    pub subject_id: String,
    /// Body-model shape coefficients; also drive the rendered proportions.
    pub latent_shape: [f64; SMPL_SHAPE_DIM],
    pub gait: GaitParams,
    /// Skin, top and bottom RGB followed by the stripe frequency of the top.
    pub appearance_signature: Vec<f64>,
}

pub fn identity_profile(spec: &DatasetSpec, index: usize) -> IdentityProfile {
    let mut rng = SplitMix64::seed_from_u64(derive_seed(spec.seed, 2 * index as u64));
    let mut latent_shape = [0.0; SMPL_SHAPE_DIM];
    for v in &mut latent_shape {
        *v = rng.sample(StandardNormal);
    }
    let gait = GaitParams {
        period: rng.random_range(8.0..16.0),
        stride: rng.random_range(0.2..0.55),
        knee_bend: rng.random_range(0.1..0.6),
        arm_swing: rng.random_range(0.1..0.6),
        phase: rng.random_range(0.0..TAU),
    };
    let mut appearance_signature: Vec<f64> = (0..9).map(|_| rng.random_range(0.1..0.9)).collect();
    appearance_signature.push(rng.random_range(1.0..6.0));
    IdentityProfile { subject_id: subject_id(index), latent_shape, gait, appearance_signature }
}

/// Colour and thickness change of one outfit.
#[derive(Debug, Clone, PartialEq)]
struct Outfit {
    top: [f64; 3],
    bottom: [f64; 3],
    thickness: f64,
}

fn outfit(spec: &DatasetSpec, profile: &IdentityProfile, subject: usize, variant: usize) -> Outfit {
    let mut rng = SplitMix64::seed_from_u64(derive_seed(derive_seed(spec.seed, 2 * subject as u64 + 1), 1 << 32 | variant as u64));
    let s = spec.clothing_shift;
    let sig = &profile.appearance_signature;
    let mut shifted = |base: f64| (base + s * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0);
    let top = [shifted(sig[3]), shifted(sig[4]), shifted(sig[5])];
    let bottom = [shifted(sig[6]), shifted(sig[7]), shifted(sig[8])];
    let thickness = (1.0 + 0.5 * s * rng.random_range(-1.0..1.0)).max(0.5);
    Outfit { top, bottom, thickness }
}

/// Body measurements in crop-height units.
struct Body {
    height: f64,
    head_radius: f64,
    shoulder_half: f64,
    hip_half: f64,
    arm_thickness: f64,
    leg_thickness: f64,
    torso_scale: f64,
    lean: f64,
}

impl Body {
    fn from_latent(l: &[f64; SMPL_SHAPE_DIM]) -> Self {
        let height = 0.84 + 0.08 * l[0].tanh();
        Self {
            height,
            head_radius: height * (0.07 + 0.012 * l[1].tanh()),
            shoulder_half: height * (0.12 + 0.03 * l[2].tanh()),
            hip_half: height * (0.08 + 0.025 * l[3].tanh()),
            arm_thickness: height * (0.035 + 0.01 * l[4].tanh()),
            leg_thickness: height * (0.05 + 0.012 * l[5].tanh()),
            torso_scale: 0.5 + 0.06 * l[6].tanh(),
            lean: 0.03 * l[7].tanh(),
        }
    }
}

/// Joint positions of one pose, `(x, y)` in crop-height units, COCO order.
fn pose_joints(body: &Body, gait: &GaitParams, phi: f64, aspect: f64) -> [[f64; 2]; COCO_JOINTS] {
    let cx = aspect / 2.0;
    let bob = 0.01 * body.height * (2.0 * phi).cos();
    let top = 1.0 - body.height - 0.01 + bob;
    let r = body.head_radius;
    let neck_y = top + 2.0 * r;
    let shoulder_y = neck_y + 0.03 * body.height;
    let hip_y = top + body.height * body.torso_scale;
    let leg = (0.985 + bob - hip_y) / 2.0;
    let arm = (hip_y - shoulder_y) * 0.55;
    let ux = cx + body.lean;
    let limb = |from: [f64; 2], angle: f64, len: f64| [from[0] + angle.sin() * len, from[1] + angle.cos() * len];

    let mut j = [[0.0; 2]; COCO_JOINTS];
    j[0] = [ux, top + 1.1 * r];
    j[1] = [ux - 0.35 * r, top + 0.8 * r];
    j[2] = [ux + 0.35 * r, top + 0.8 * r];
    j[3] = [ux - 0.9 * r, top + r];
    j[4] = [ux + 0.9 * r, top + r];
    j[5] = [ux - body.shoulder_half, shoulder_y];
    j[6] = [ux + body.shoulder_half, shoulder_y];
    for (side, sign) in [(0usize, 1.0), (1, -1.0)] {
        let swing = sign * gait.stride * phi.sin();
        let bend = gait.knee_bend * (sign * phi.cos()).max(0.0);
        let arm_angle = -sign * gait.arm_swing * phi.sin();
        let elbow = limb(j[5 + side], arm_angle, arm);
        j[7 + side] = elbow;
        j[9 + side] = limb(elbow, arm_angle - 0.25, arm * 0.9);
        let hip = [cx + (side as f64 * 2.0 - 1.0) * body.hip_half * 0.6, hip_y];
        j[11 + side] = hip;
        let knee = limb(hip, swing, leg);
        j[13 + side] = knee;
        j[15 + side] = limb(knee, swing - bend, leg);
    }
    j
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

#[derive(Clone, Copy, PartialEq)]
enum Region {
    Background,
    Skin,
    Top,
    Bottom,
}

fn region_at(p: [f64; 2], j: &[[f64; 2]; COCO_JOINTS], body: &Body, thickness: f64) -> Region {
    let head = [j[0][0], j[0][1] - 0.1 * body.head_radius];
    if (p[0] - head[0]).hypot(p[1] - head[1]) <= body.head_radius {
        return Region::Skin;
    }
    let (shoulder_y, hip_y) = (j[5][1], j[11][1]);
    if p[1] >= head[1] + body.head_radius && p[1] < shoulder_y {
        if (p[0] - head[0]).abs() <= 0.45 * body.head_radius {
            return Region::Skin;
        }
    }
    if p[1] >= shoulder_y && p[1] <= hip_y {
        let t = (p[1] - shoulder_y) / (hip_y - shoulder_y).max(1e-9);
        let cx = (j[5][0] + j[6][0]) / 2.0 * (1.0 - t) + (j[11][0] + j[12][0]) / 2.0 * t;
        let half = (body.shoulder_half * (1.0 - t) + body.hip_half * t) * thickness;
        if (p[0] - cx).abs() <= half {
            return Region::Top;
        }
    }
    let arm = body.arm_thickness * thickness;
    for side in 0..2 {
        if segment_distance(p, j[5 + side], j[7 + side]) <= arm || segment_distance(p, j[7 + side], j[9 + side]) <= arm {
            return Region::Top;
        }
    }
    let leg = body.leg_thickness * thickness;
    for side in 0..2 {
        if segment_distance(p, j[11 + side], j[13 + side]) <= leg || segment_distance(p, j[13 + side], j[15 + side]) <= leg {
            return Region::Bottom;
        }
    }
    Region::Background
}

/// One frame in f64 before quantization.
struct RawFrame {
    mask: Vec<bool>,
    rgb: Vec<f64>,
    smpl: Vec<f64>,
    joints: Vec<[f64; 2]>,
    confidence: Vec<f64>,
}

fn normal(rng: &mut SplitMix64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Per-tracklet camera response: `gain·v + cast`.
struct Camera {
    gain: f64,
    cast: [f64; 3],
}

fn render_frame(
    spec: &DatasetSpec,
    profile: &IdentityProfile,
    outfit: &Outfit,
    camera: &Camera,
    phi: f64,
    rng: &mut SplitMix64,
) -> RawFrame {
    let (h, w) = (spec.height, spec.width);
    let aspect = w as f64 / h as f64;
    let body = Body::from_latent(&profile.latent_shape);
    let joints = pose_joints(&body, &profile.gait, phi, aspect);
    let sig = &profile.appearance_signature;
    let skin = [sig[0], sig[1], sig[2]];
    let stripes = sig[9];

    let mut mask = Vec::with_capacity(h * w);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let p = [(c as f64 + 0.5) / h as f64, (r as f64 + 0.5) / h as f64];
            let region = region_at(p, &joints, &body, outfit.thickness);
            let colour = match region {
                Region::Background => [BACKGROUND; 3],
                Region::Skin => skin,
                Region::Top => {
                    let k = 0.85 + 0.15 * (TAU * stripes * p[1]).sin();
                    outfit.top.map(|v| v * k)
                }
                Region::Bottom => outfit.bottom,
            };
            let mut inside = region != Region::Background;
            if spec.flip_rate > 0.0 && rng.random::<f64>() < spec.flip_rate {
                inside = !inside;
            }
            mask.push(inside);
            for (v, cast) in colour.into_iter().zip(camera.cast) {
                rgb.push((camera.gain * v + cast + normal(rng, spec.pixel_noise)).clamp(0.0, 1.0));
            }
        }
    }

    let mut smpl = vec![body.height, body.lean, 0.0];
    smpl.extend(profile.latent_shape.iter().map(|&l| l + normal(rng, spec.shape_noise)));
    let mut pose = [0.0; SMPL_POSE_DIM];
    let g = &profile.gait;
    pose[3] = g.stride * phi.sin();
    pose[6] = -g.stride * phi.sin();
    pose[9] = body.lean * 3.0;
    pose[12] = g.knee_bend * phi.cos().max(0.0);
    pose[15] = g.knee_bend * (-phi.cos()).max(0.0);
    pose[48] = -g.arm_swing * phi.sin();
    pose[51] = g.arm_swing * phi.sin();
    pose[54] = 0.25;
    pose[57] = 0.25;
    smpl.extend(pose.iter().map(|&v| v + normal(rng, 2.0 * spec.keypoint_jitter)));

    let mut skel = Vec::with_capacity(COCO_JOINTS);
    let mut confidence = Vec::with_capacity(COCO_JOINTS);
    for j in joints {
        let (ex, ey) = (normal(rng, spec.keypoint_jitter), normal(rng, spec.keypoint_jitter));
        skel.push([(j[0] + ex) / aspect, j[1] + ey]);
        let err = ex.hypot(ey);
        confidence.push((1.0 - 5.0 * err).clamp(0.0, 1.0));
    }
    RawFrame { mask, rgb, smpl, joints: skel, confidence }
}

fn q<T: Real>(v: f64) -> T {
    T::lit(v as f32 as f64)
}

fn quantize<T: Real>(spec: &DatasetSpec, raw: RawFrame) -> Frame<T> {
    let rgb = FeatureGrid::new(spec.height, spec.width, 3, raw.rgb.into_iter().map(q).collect()).expect("rgb grid");
    let smpl: Vec<T> = raw.smpl.into_iter().map(q).collect();
    let joints = raw.joints.into_iter().map(|[x, y]| [q(x), q(y)]).collect();
    let confidence = raw.confidence.into_iter().map(q).collect();
    Frame {
        silhouette: SilhouetteInput::from_rgb(raw.mask, &rgb).expect("mask matches rgb"),
        smpl: SmplParams::from_slice(&smpl).expect("finite smpl"),
        skeleton: SkeletonFrame::new(joints, confidence).expect("finite joints"),
        appearance: rgb,
    }
}

/// Renders tracklet `tracklet` of subject `subject`. Values pass through f32,
/// so a tracklet read back from its container is identical.
pub fn generate_tracklet<T: Real>(spec: &DatasetSpec, subject: usize, tracklet: usize) -> Result<TrackletRecord<T>> {
    spec.validate()?;
    let profile = identity_profile(spec, subject);
    let clothing = tracklet % spec.clothing_variants;
    let outfit = outfit(spec, &profile, subject, clothing);
    let mut rng = SplitMix64::seed_from_u64(derive_seed(derive_seed(spec.seed, 2 * subject as u64 + 1), tracklet as u64));
    let start = profile.gait.phase + spec.phase_jitter * rng.random_range(0.0..TAU);
    let camera = Camera {
        gain: normal(&mut rng, spec.illumination).exp(),
        cast: [(); 3].map(|_| normal(&mut rng, spec.illumination)),
    };
    let frames = (0..spec.frames_per_tracklet)
        .map(|f| {
            let phi = start + TAU * f as f64 / profile.gait.period;
            quantize(spec, render_frame(spec, &profile, &outfit, &camera, phi, &mut rng))
        })
        .collect();
    TrackletRecord::new(&tracklet_id(subject, tracklet), &profile.subject_id, &format!("c{clothing}"), frames)
}

/// All tracklets of the dataset, subject-major, rendered in parallel.
pub fn generate_records<T: Real>(spec: &DatasetSpec) -> Result<Vec<TrackletRecord<T>>> {
    spec.validate()?;
    (0..spec.tracklet_count())
        .into_par_iter()
        .map(|i| generate_tracklet(spec, i / spec.tracklets_per_id, i % spec.tracklets_per_id))
        .collect()
}

pub fn encode_container<T: Real>(frames: &[Frame<T>]) -> Result<Vec<u8>> {
    let first = frames.first().ok_or(Error::EmptyInput("container frames"))?;
    let (h, w) = (first.appearance.height(), first.appearance.width());
    let mut out = LeWriter::default();
    out.bytes(CONTAINER_MAGIC);
    out.u32(frames.len() as u32);
    out.u32(h as u32);
    out.u32(w as u32);
    for f in frames {
        if f.appearance.dims() != (h, w, 3) {
            return Err(Error::InvalidInput("frames of one container must share a size".into()));
        }
        let mask: Vec<T> = f.silhouette.mask().iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        let sections: [(u8, &[T]); 3] =
            [(SECTION_MASK, &mask), (SECTION_RGB, f.appearance.as_slice()), (SECTION_SMPL, f.smpl.as_slice())];
        for (code, values) in sections {
            out.u8(code);
            out.u32(values.len() as u32);
            out.f32s(values);
        }
        let skel = f.skeleton.to_features();
        out.u8(SECTION_SKELETON);
        out.u32(skel.len() as u32);
        out.f32s(&skel);
    }
    Ok(out.buf)
}

pub fn decode_container<T: Real>(bytes: &[u8]) -> std::result::Result<Vec<Frame<T>>, String> {
    let rest = bytes.strip_prefix(CONTAINER_MAGIC.as_slice()).ok_or("bad magic")?;
    let mut r = LeReader::new(rest);
    let n = r.u32()? as usize;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    if n == 0 || h == 0 || w == 0 {
        return Err("empty container".into());
    }
    let mut frames = Vec::with_capacity(n);
    for f in 0..n {
        let mut sections: BTreeMap<u8, Vec<T>> = BTreeMap::new();
        for _ in 0..4 {
            let code = r.u8()?;
            let len = r.u32()? as usize;
            let expected = match code {
                SECTION_MASK => h * w,
                SECTION_RGB => h * w * 3,
                SECTION_SMPL => crate::encoders::SMPL_DIM,
                SECTION_SKELETON => COCO_JOINTS * 3,
                other => return Err(format!("frame {f}: unknown section code {other}")),
            };
            if len != expected {
                return Err(format!("frame {f}: section {code} has {len} values, expected {expected}"));
            }
            if sections.insert(code, r.f32_vec(len)?).is_some() {
                return Err(format!("frame {f}: duplicate section {code}"));
            }
        }
        let mask: Vec<bool> = sections[&SECTION_MASK].iter().map(|&v| v != T::zero()).collect();
        let rgb = FeatureGrid::new(h, w, 3, sections.remove(&SECTION_RGB).expect("rgb")).map_err(|e| e.to_string())?;
        let skel = &sections[&SECTION_SKELETON];
        let joints = skel[..2 * COCO_JOINTS].chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        frames.push(Frame {
            silhouette: SilhouetteInput::from_rgb(mask, &rgb).map_err(|e| e.to_string())?,
            smpl: SmplParams::from_slice(&sections[&SECTION_SMPL]).map_err(|e| e.to_string())?,
            skeleton: SkeletonFrame::new(joints, skel[2 * COCO_JOINTS..].to_vec()).map_err(|e| e.to_string())?,
            appearance: rgb,
        });
    }
    if !r.is_empty() {
        return Err("trailing bytes".into());
    }
    Ok(frames)
}

pub fn write_container<T: Real>(path: &Path, frames: &[Frame<T>]) -> Result<()> {
    fs::write(path, encode_container(frames)?).map_err(|e| Error::io(path, e))
}

pub fn read_container<T: Real>(path: &Path) -> Result<Vec<Frame<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes).map_err(|reason| Error::corrupt(path, reason))
}

/// Writes `manifest.csv` and `frames/<tracklet>.shrc` under `dir`.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let rows = (0..spec.tracklet_count())
        .into_par_iter()
        .map(|i| {
            let record: TrackletRecord<f32> = generate_tracklet(spec, i / spec.tracklets_per_id, i % spec.tracklets_per_id)?;
            let rel = format!("frames/{}.shrc", record.tracklet_id);
            write_container(&dir.join(&rel), &record.frames)?;
            Ok(ManifestRow {
                tracklet_id: record.tracklet_id,
                subject_id: record.subject_id,
                clothing_id: record.clothing_id,
                frames_path: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&dir.join("manifest.csv"), &rows, None)?;
    Ok(rows)
}

/// Loads every tracklet listed in a manifest file.
pub fn load_tracklets<T: Real>(manifest: &Path) -> Result<Vec<TrackletRecord<T>>> {
    let rows = read_manifest(manifest)?;
    rows.par_iter()
        .map(|row| {
            let frames = read_container(&resolve_frames_path(manifest, row))?;
            TrackletRecord::new(&row.tracklet_id, &row.subject_id, &row.clothing_id, frames)
        })
        .collect()
}

/// Splits a manifest into gallery and query tracklets.
///
/// For each subject about `query_ratio` of its tracklets become queries,
/// at least one and never all. Whole outfits are moved to the query side
/// when possible, so query clothing does not appear in the gallery; when
/// every tracklet shares one outfit, individual tracklets are drawn instead.
pub fn split_protocol(rows: &[ManifestRow], query_ratio: f64, seed: u64) -> Result<(Vec<ManifestRow>, Vec<ManifestRow>)> {
    if !(query_ratio > 0.0 && query_ratio < 1.0) {
        return Err(Error::ProtocolError(format!("query ratio {query_ratio} must lie in (0, 1)")));
    }
    let mut by_subject: BTreeMap<&str, Vec<&ManifestRow>> = BTreeMap::new();
    for row in rows {
        by_subject.entry(&row.subject_id).or_default().push(row);
    }
    let mut query_ids = std::collections::BTreeSet::new();
    for (n, (subject, tracklets)) in by_subject.iter().enumerate() {
        if tracklets.len() < 2 {
            return Err(Error::ProtocolError(format!("subject {subject} has a single tracklet")));
        }
        let mut rng = SplitMix64::seed_from_u64(derive_seed(seed, n as u64));
        let target = ((query_ratio * tracklets.len() as f64).round() as usize).clamp(1, tracklets.len() - 1);
        let mut outfits: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for t in tracklets {
            outfits.entry(&t.clothing_id).or_default().push(&t.tracklet_id);
        }
        let mut groups: Vec<Vec<&str>> = outfits.into_values().collect();
        groups.shuffle(&mut rng);
        let mut chosen: Vec<&str> = Vec::new();
        if groups.len() > 1 {
            for g in &groups {
                if chosen.len() + g.len() <= target {
                    chosen.extend(g);
                }
            }
        }
        if chosen.is_empty() {
            let mut all: Vec<&str> = tracklets.iter().map(|t| t.tracklet_id.as_str()).collect();
            all.shuffle(&mut rng);
            chosen.extend(all.into_iter().take(target));
        }
        query_ids.extend(chosen);
    }
    let (query, gallery): (Vec<ManifestRow>, Vec<ManifestRow>) =
        rows.iter().cloned().partition(|r| query_ids.contains(r.tracklet_id.as_str()));
    Ok((gallery, query))
}

/// Width of the per-tracklet feature vector from [`toy_samples`].
pub const TOY_FEATURES: usize = SMPL_SHAPE_DIM + COCO_JOINTS * 3 + 12;

/// Hand-crafted per-tracklet features for the toy trainer: frame means of the
/// body-shape coefficients, skeleton features and the mean foreground colour
/// of four horizontal bands. Labels index the sorted subject ids.
pub fn toy_samples<T: Real>(records: &[TrackletRecord<T>]) -> Result<(Matrix<T>, Vec<usize>)> {
    let subjects: std::collections::BTreeSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    let index: BTreeMap<&str, usize> = subjects.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    let mut rows = Vec::with_capacity(records.len());
    for record in records {
        let mut acc = vec![T::zero(); TOY_FEATURES];
        for f in &record.frames {
            let mut feat: Vec<T> = f.smpl.shape().to_vec();
            feat.extend(f.skeleton.to_features());
            let (h, w) = (f.appearance.height(), f.appearance.width());
            for band in 0..4 {
                let mut sum = [T::zero(); 3];
                let mut count = 0usize;
                for r in band * h / 4..(band + 1) * h / 4 {
                    for c in 0..w {
                        if f.silhouette.mask()[r * w + c] {
                            for (s, &v) in sum.iter_mut().zip(f.appearance.pixel(r, c)) {
                                *s += v;
                            }
                            count += 1;
                        }
                    }
                }
                let n = T::from_usize_lossy(count.max(1));
                feat.extend(sum.iter().map(|&s| s / n));
            }
            for (a, v) in acc.iter_mut().zip(feat) {
                *a += v;
            }
        }
        let n = T::from_usize_lossy(record.frames.len());
        rows.push(acc.into_iter().map(|v| v / n).collect());
    }
    let labels = records.iter().map(|r| index[r.subject_id.as_str()]).collect();
    Ok((Matrix::from_rows(&rows)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec { num_ids: 3, tracklets_per_id: 3, frames_per_tracklet: 5, clothing_variants: 3, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small();
        let a: Vec<TrackletRecord<f64>> = generate_records(&spec).unwrap();
        let b: Vec<TrackletRecord<f64>> = generate_records(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 9);
        assert_eq!(a[4].tracklet_id, "id0001_t01");
        assert_eq!(a[4].clothing_id, "c1");
    }

    #[test]
    fn frames_respect_modality_invariants() {
        let spec = small();
        for record in generate_records::<f64>(&spec).unwrap() {
            for f in &record.frames {
                assert_eq!(f.smpl.as_slice().len(), 85);
                assert_eq!(f.skeleton.joints().len(), 17);
                assert_eq!(f.appearance.dims(), (32, 16, 3));
                let masked = f.silhouette.masked_rgb();
                for (p, &inside) in f.silhouette.mask().iter().enumerate() {
                    let expected: &[f64] = if inside { f.appearance.at(p) } else { &[0.0; 3] };
                    assert_eq!(masked.at(p), expected);
                }
                let fg = f.silhouette.mask().iter().filter(|&&m| m).count();
                assert!(fg > 40 && fg < 400, "foreground pixels {fg}");
            }
        }
    }

    #[test]
    fn noiseless_tracklets_of_one_outfit_are_identical() {
        let spec = DatasetSpec {
            clothing_variants: 1,
            flip_rate: 0.0,
            keypoint_jitter: 0.0,
            shape_noise: 0.0,
            pixel_noise: 0.0,
            phase_jitter: 0.0,
            illumination: 0.0,
            ..small()
        };
        let a: TrackletRecord<f64> = generate_tracklet(&spec, 1, 0).unwrap();
        let b: TrackletRecord<f64> = generate_tracklet(&spec, 1, 2).unwrap();
        assert_eq!(a.frames, b.frames);
        let other: TrackletRecord<f64> = generate_tracklet(&spec, 2, 0).unwrap();
        assert_ne!(a.frames[0].smpl, other.frames[0].smpl);
    }

    #[test]
    fn container_round_trip() {
        let record: TrackletRecord<f64> = generate_tracklet(&small(), 0, 1).unwrap();
        let bytes = encode_container(&record.frames).unwrap();
        assert_eq!(&bytes[..8], CONTAINER_MAGIC);
        let back: Vec<Frame<f64>> = decode_container(&bytes).unwrap();
        assert_eq!(back, record.frames);
        assert!(decode_container::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[20] = 9;
        assert!(decode_container::<f64>(&wrong).unwrap_err().contains("unknown section"));
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let rows = generate_dataset(&spec, dir.path()).unwrap();
        assert_eq!(rows.len(), 9);
        let loaded: Vec<TrackletRecord<f64>> = load_tracklets(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded, generate_records::<f64>(&spec).unwrap());
        let first = fs::read(dir.path().join(&rows[0].frames_path)).unwrap();
        let again = tempfile::tempdir().unwrap();
        generate_dataset(&spec, again.path()).unwrap();
        assert_eq!(fs::read(again.path().join(&rows[0].frames_path)).unwrap(), first);
        assert_eq!(
            fs::read(dir.path().join("manifest.csv")).unwrap(),
            fs::read(again.path().join("manifest.csv")).unwrap()
        );
    }

    fn rows(spec: &DatasetSpec) -> Vec<ManifestRow> {
        (0..spec.tracklet_count())
            .map(|i| {
                let (s, t) = (i / spec.tracklets_per_id, i % spec.tracklets_per_id);
                ManifestRow {
                    tracklet_id: tracklet_id(s, t),
                    subject_id: subject_id(s),
                    clothing_id: format!("c{}", t % spec.clothing_variants),
                    frames_path: String::new(),
                }
            })
            .collect()
    }

    #[test]
    fn split_is_disjoint_covering_and_clothes_changing() {
        let spec = DatasetSpec { num_ids: 20, tracklets_per_id: 4, clothing_variants: 3, ..Default::default() };
        let all = rows(&spec);
        let (gallery, query) = split_protocol(&all, 0.25, 9).unwrap();
        assert_eq!(gallery.len() + query.len(), all.len());
        assert_eq!(query.len(), 20);
        for q in &query {
            assert!(!gallery.iter().any(|g| g.tracklet_id == q.tracklet_id));
            let own: Vec<&ManifestRow> = gallery.iter().filter(|g| g.subject_id == q.subject_id).collect();
            assert!(!own.is_empty());
            assert!(own.iter().all(|g| g.clothing_id != q.clothing_id));
        }
        assert_eq!(split_protocol(&all, 0.25, 9).unwrap(), (gallery, query));
    }

    #[test]
    fn split_falls_back_to_tracklets_with_one_outfit() {
        let spec = DatasetSpec { num_ids: 5, tracklets_per_id: 4, clothing_variants: 1, ..Default::default() };
        let (gallery, query) = split_protocol(&rows(&spec), 0.5, 1).unwrap();
        assert_eq!((gallery.len(), query.len()), (10, 10));
        let single = DatasetSpec { tracklets_per_id: 1, ..spec };
        assert!(matches!(split_protocol(&rows(&single), 0.5, 1), Err(Error::ProtocolError(_))));
    }

    #[test]
    fn invalid_spec_names_field() {
        let spec = DatasetSpec { flip_rate: 1.5, ..Default::default() };
        assert!(spec.validate().unwrap_err().to_string().contains("dataset.flip_rate"));
        let spec = DatasetSpec { num_ids: 0, ..Default::default() };
        assert!(spec.validate().unwrap_err().to_string().contains("dataset.num_ids"));
    }

    #[test]
    fn toy_samples_shape() {
        let records: Vec<TrackletRecord<f64>> = generate_records(&small()).unwrap();
        let (x, y) = toy_samples(&records).unwrap();
        assert_eq!((x.rows(), x.cols()), (9, TOY_FEATURES));
        assert_eq!(y, [0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }
}
