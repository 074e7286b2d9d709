//! Procedural animated figure with an analytic renderer, and the on-disk
//! dataset format.
//!
//! The ground-truth renderer here is written independently of
//! [`crate::render`] and serves as its quadrature oracle.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::body::{self, BodyTemplate, Humanoid, Pose};
use crate::render::{self, Camera};
use crate::{CoreError, Result};

/// Peak density of the analytic figure (1/m).
pub const DENSITY_MAX: f64 = 50.0;
/// Width of the sigmoid occupancy edge (m).
pub const EDGE_SOFTNESS: f64 = 0.01;
/// Depth samples per ray for ground-truth images.
pub const GT_SAMPLES: usize = 128;
/// Camera ring radius (m) and look-at height.
pub const RING_RADIUS: f64 = 3.0;
pub const LOOK_AT_Y: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    /// Every frame has the same pose; the skirt still sways with time.
    Static,
    /// Animated skeleton, no skirt.
    Rigid,
    /// Animated skeleton plus the swaying skirt.
    #[default]
    Dynamic,
}

/// Ellipsoidal blob hanging from the pelvis, displaced along x by a time
/// sinusoid plus a pose term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skirt {
    /// Rest center in canonical coordinates.
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub color: [f64; 3],
    /// Peak-to-trough sway (m) of the time term.
    pub amplitude: f64,
    /// Sway per radian of leg spread.
    pub pose_gain: f64,
}

impl Skirt {
    /// Canonical-space x offset at normalized time `t` for pose `theta`.
    pub fn offset(&self, t: f64, theta: &[f64]) -> f64 {
        let time = 0.5 * self.amplitude * (1.0 - (std::f64::consts::TAU * t).cos());
        let spread = if theta.len() >= 9 { theta[3] - theta[6] } else { 0.0 };
        time + self.pose_gain * spread
    }

    /// Brightness factor at normalized time `t`.
    pub fn brightness(&self, t: f64) -> f64 {
        0.8 + 0.2 * (std::f64::consts::TAU * t).sin()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub humanoid: Humanoid,
    pub template: BodyTemplate,
    pub poses: Vec<Pose>,
    /// Base color per capsule.
    pub colors: Vec<[f64; 3]>,
    pub skirt: Option<Skirt>,
    pub seed: u64,
    pub difficulty: Difficulty,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.35, 0.25],
    [0.20, 0.35, 0.75],
    [0.25, 0.55, 0.85],
    [0.90, 0.75, 0.35],
    [0.95, 0.60, 0.30],
    [0.90, 0.78, 0.68],
];

/// Builds a deterministic animated figure.
pub fn generate_scene(seed: u64, frames: usize, joints: usize, difficulty: Difficulty) -> Result<SyntheticScene> {
    if frames == 0 {
        return Err(CoreError::Config("at least one frame is required".into()));
    }
    let humanoid = Humanoid::new(joints)?;
    let template = humanoid.template();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let gain: f64 = rng.random_range(0.8..1.2);
    let colors = (0..joints)
        .map(|j| {
            let jitter: f64 = rng.random_range(-0.05..0.05);
            PALETTE[j].map(|c| (c + jitter).clamp(0.0, 1.0))
        })
        .collect();

    let poses = (0..frames)
        .map(|f| {
            let t = f as f64 / frames as f64;
            let mut pose = Pose::rest(joints);
            pose.frame = f;
            pose.time_norm = t;
            if difficulty != Difficulty::Static {
                let w = std::f64::consts::TAU * t + phase;
                let theta = &mut pose.theta;
                // Torso twist about y.
                theta[1] = 0.15 * gain * w.sin();
                // Legs swing about x in opposition.
                theta[3] = 0.35 * gain * w.sin();
                if joints > 2 {
                    theta[6] = -0.35 * gain * w.sin();
                }
                // Arms swing against the legs.
                if joints > 3 {
                    theta[9] = -0.5 * gain * w.sin();
                }
                if joints > 4 {
                    theta[12] = 0.5 * gain * w.sin();
                }
                if joints > 5 {
                    theta[15] = 0.1 * (2.0 * w).sin();
                }
                pose.root = [0.0, 0.02 * (2.0 * w).sin(), 0.0];
            }
            pose
        })
        .collect();

    let skirt = (difficulty != Difficulty::Rigid).then(|| Skirt {
        center: [0.0, 0.82, 0.0],
        radii: [0.2, 0.09, 0.17],
        color: [0.55, 0.20, 0.60],
        amplitude: 0.06,
        pose_gain: 0.05,
    });
    Ok(SyntheticScene { humanoid, template, poses, colors, skirt, seed, difficulty })
}

fn v3(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn apply(m: &Matrix4<f64>, p: Vector3<f64>) -> Vector3<f64> {
    m.fixed_view::<3, 3>(0, 0) * p + m.fixed_view::<3, 1>(0, 3)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Precomputed per-frame state for point queries.
pub struct FrameField<'a> {
    scene: &'a SyntheticScene,
    /// World-to-canonical per capsule joint.
    inverse: Vec<Matrix4<f64>>,
    skirt_offset: f64,
    skirt_brightness: f64,
}

impl SyntheticScene {
    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    pub fn frame_field(&self, frame: usize) -> Result<FrameField<'_>> {
        let pose = self
            .poses
            .get(frame)
            .ok_or_else(|| CoreError::Invalid(format!("frame {frame} out of range ({} frames)", self.frames())))?;
        let inverse = body::joint_transforms(&self.humanoid.joints, pose)?
            .into_iter()
            .map(|m| m.try_inverse().ok_or_else(|| CoreError::Numerical("singular joint transform".into())))
            .collect::<Result<_>>()?;
        let (skirt_offset, skirt_brightness) = match &self.skirt {
            Some(s) => (s.offset(pose.time_norm, &pose.theta), s.brightness(pose.time_norm)),
            None => (0.0, 1.0),
        };
        Ok(FrameField { scene: self, inverse, skirt_offset, skirt_brightness })
    }
}

impl FrameField<'_> {
    /// Density and color at world point `p`.
    pub fn query(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let pw = v3(p);
        let mut sigma = 0.0;
        let mut acc = Vector3::zeros();
        for (k, cap) in self.scene.humanoid.capsules.iter().enumerate() {
            let q = apply(&self.inverse[cap.joint], pw);
            let (a, b) = (v3(cap.a), v3(cap.b));
            let ab = b - a;
            let s = ((q - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            let dist = (q - (a + ab * s)).norm() - cap.radius;
            if dist > 20.0 * EDGE_SOFTNESS {
                continue;
            }
            let d = DENSITY_MAX * sigmoid(-dist / EDGE_SOFTNESS);
            let stripe = 0.85 + 0.15 * (std::f64::consts::TAU * 3.0 * s).sin();
            sigma += d;
            acc += v3(self.scene.colors[k]) * (d * stripe);
        }
        if let Some(sk) = &self.scene.skirt {
            let q = apply(&self.inverse[0], pw);
            let c = v3(sk.center) + Vector3::new(self.skirt_offset, 0.0, 0.0);
            let r = q - c;
            let e = Vector3::new(r.x / sk.radii[0], r.y / sk.radii[1], r.z / sk.radii[2]);
            let min_r = sk.radii.iter().copied().fold(f64::INFINITY, f64::min);
            let dist = (e.norm() - 1.0) * min_r;
            if dist <= 20.0 * EDGE_SOFTNESS {
                let d = DENSITY_MAX * sigmoid(-dist / EDGE_SOFTNESS);
                sigma += d;
                acc += v3(sk.color) * (d * self.skirt_brightness);
            }
        }
        if sigma <= 0.0 {
            return (0.0, [0.0; 3]);
        }
        let c = acc / sigma;
        (sigma, [c.x.clamp(0.0, 1.0), c.y.clamp(0.0, 1.0), c.z.clamp(0.0, 1.0)])
    }
}

/// Quadrature over `(color, density)` samples at `depths`, with the last
/// interval closed at `far`. Transmittance is recomputed from scratch for
/// every sample. Returns `(rgb over black, alpha)`.
pub fn oracle_composite(colors: &[[f64; 3]], densities: &[f64], depths: &[f64], far: f64) -> ([f64; 3], f64) {
    let s = depths.len();
    let delta = |k: usize| if k + 1 < s { depths[k + 1] - depths[k] } else { far - depths[k] };
    let mut rgb = [0.0; 3];
    let mut alpha = 0.0;
    for k in 0..s {
        let optical: f64 = (0..k).map(|j| densities[j] * delta(j)).sum();
        let w = (-optical).exp() * (1.0 - (-densities[k] * delta(k)).exp());
        for c in 0..3 {
            rgb[c] += w * colors[k][c];
        }
        alpha += w;
    }
    (rgb, alpha)
}

/// Ground-truth image of `frame` over black: `(rgb, alpha)`, row-major.
pub fn oracle_render(scene: &SyntheticScene, camera: &Camera, frame: usize, samples: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    camera.validate()?;
    if samples == 0 {
        return Err(CoreError::Config("samples per ray must be positive".into()));
    }
    let field = scene.frame_field(frame)?;
    let (w, h) = (camera.width, camera.height);
    let m = camera.matrix();
    let rot = m.fixed_view::<3, 3>(0, 0).into_owned();
    let origin = v3(camera.origin());
    let step = (camera.far - camera.near) / samples as f64;
    let depths: Vec<f64> = (0..samples).map(|k| camera.near + step * (k as f64 + 0.5)).collect();
    let mut rgb = Vec::with_capacity(3 * (w * h) as usize);
    let mut alpha = Vec::with_capacity((w * h) as usize);
    let mut colors = vec![[0.0; 3]; samples];
    let mut dens = vec![0.0; samples];
    for v in 0..h {
        for u in 0..w {
            let d = Vector3::new((u as f64 + 0.5 - camera.cx) / camera.fx, (v as f64 + 0.5 - camera.cy) / camera.fy, 1.0);
            let dir = (rot * d).normalize();
            for (k, &t) in depths.iter().enumerate() {
                let p = origin + dir * t;
                let (s, c) = field.query([p.x, p.y, p.z]);
                dens[k] = s;
                colors[k] = c;
            }
            let (c, a) = oracle_composite(&colors, &dens, &depths, camera.far);
            rgb.extend_from_slice(&c);
            alpha.push(a);
        }
    }
    Ok((rgb, alpha))
}

/// `count` cameras evenly spaced on a horizontal ring around the figure.
pub fn ring_cameras(count: usize, res: u32) -> Vec<Camera> {
    let focal = 144.0 * res as f64 / 96.0;
    (0..count)
        .map(|c| {
            let a = std::f64::consts::TAU * c as f64 / count as f64;
            let eye = [RING_RADIUS * a.sin(), 1.0, RING_RADIUS * a.cos()];
            Camera::look_at(eye, [0.0, LOOK_AT_Y, 0.0], [0.0, 1.0, 0.0], res, res, focal, RING_RADIUS - 0.8, RING_RADIUS + 0.8)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateOptions {
    pub seed: u64,
    pub frames: usize,
    pub cameras: usize,
    pub res: u32,
    pub joints: usize,
    pub difficulty: Difficulty,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { seed: 0, frames: 16, cameras: 4, res: 96, joints: 6, difficulty: Difficulty::Dynamic }
    }
}

impl GenerateOptions {
    /// Larger preset: 8 cameras, 64 frames, 256x256.
    pub fn large_preset() -> Self {
        Self { frames: 64, cameras: 8, res: 256, ..Self::default() }
    }
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub frames: usize,
    pub cameras: usize,
    pub near: f64,
    pub far: f64,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub difficulty: Difficulty,
}

/// A dataset loaded in memory. Images are indexed `camera * frames + frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: Meta,
    pub cameras: Vec<Camera>,
    pub poses: Vec<Pose>,
    pub template: BodyTemplate,
    /// RGB in [0, 1], row-major.
    pub images: Vec<Vec<f32>>,
    pub masks: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn index(&self, camera: usize, frame: usize) -> usize {
        camera * self.meta.frames + frame
    }

    pub fn image(&self, camera: usize, frame: usize) -> &[f32] {
        &self.images[self.index(camera, frame)]
    }

    pub fn mask(&self, camera: usize, frame: usize) -> &[u8] {
        &self.masks[self.index(camera, frame)]
    }
}

/// Renders every camera and frame of a new scene.
pub fn generate_dataset(opts: &GenerateOptions) -> Result<Dataset> {
    if opts.cameras == 0 {
        return Err(CoreError::Config("at least one camera is required".into()));
    }
    if opts.res < 8 {
        return Err(CoreError::Config(format!("resolution {} is too small", opts.res)));
    }
    let scene = generate_scene(opts.seed, opts.frames, opts.joints, opts.difficulty)?;
    let cameras = ring_cameras(opts.cameras, opts.res);
    let jobs: Vec<(usize, usize)> = (0..opts.cameras).flat_map(|c| (0..opts.frames).map(move |f| (c, f))).collect();
    let rendered: Vec<(Vec<f32>, Vec<u8>)> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let (rgb, alpha) = oracle_render(&scene, &cameras[c], f, GT_SAMPLES)?;
            let rgb = rgb.into_iter().map(|x| render::to_u8(x) as f32 / 255.0).collect();
            let mask = alpha.into_iter().map(|a| if a >= 0.5 { 255 } else { 0 }).collect();
            Ok((rgb, mask))
        })
        .collect::<Result<_>>()?;
    let (images, masks) = rendered.into_iter().unzip();
    Ok(Dataset {
        meta: Meta {
            frames: opts.frames,
            cameras: opts.cameras,
            near: cameras[0].near,
            far: cameras[0].far,
            width: opts.res,
            height: opts.res,
            seed: opts.seed,
            difficulty: opts.difficulty,
        },
        cameras,
        poses: scene.poses,
        template: scene.template,
        images,
        masks,
    })
}

pub fn image_path(dir: &Path, camera: usize, frame: usize) -> PathBuf {
    dir.join("images").join(format!("cam{camera}")).join(format!("frame{frame}.png"))
}

pub fn mask_path(dir: &Path, camera: usize, frame: usize) -> PathBuf {
    dir.join("masks").join(format!("cam{camera}")).join(format!("frame{frame}.png"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CoreError::MalformedJson { path: path.into(), source: e })?;
    s.push('\n');
    render::atomic_write(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(CoreError::MissingFile(path.into())),
        Err(e) => return Err(CoreError::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| CoreError::MalformedJson { path: path.into(), source: e })
}

/// Writes the dataset directory layout; images and masks in parallel.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    write_json(&dir.join("meta.json"), &data.meta)?;
    write_json(&dir.join("cameras.json"), &data.cameras)?;
    write_json(&dir.join("poses.json"), &data.poses)?;
    write_json(&dir.join("template.json"), &data.template)?;
    let (w, h) = (data.meta.width, data.meta.height);
    (0..data.meta.cameras * data.meta.frames).into_par_iter().try_for_each(|k| {
        let (c, f) = (k / data.meta.frames, k % data.meta.frames);
        render::write_png(&image_path(dir, c, f), w, h, &data.images[k], None)?;
        render::write_png_bytes(&mask_path(dir, c, f), w, h, png::ColorType::Grayscale, &data.masks[k])
    })
}

fn read_png(path: &Path, want: png::ColorType, width: u32, height: u32) -> Result<Vec<u8>> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(CoreError::MissingFile(path.into())),
        Err(e) => return Err(CoreError::io(path, e)),
    };
    let bad = |detail: String| CoreError::Image { path: path.into(), detail };
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight || info.color_type != want {
        return Err(bad(format!("expected 8-bit {want:?}, found {:?} {:?}", info.bit_depth, info.color_type)));
    }
    if (info.width, info.height) != (width, height) {
        return Err(bad(format!("expected {width}x{height}, found {}x{}", info.width, info.height)));
    }
    buf.truncate(info.buffer_size());
    Ok(buf)
}

/// Loads and validates a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CoreError::MissingFile(dir.into()));
    }
    let meta: Meta = read_json(&dir.join("meta.json"))?;
    let cameras: Vec<Camera> = read_json(&dir.join("cameras.json"))?;
    let poses: Vec<Pose> = read_json(&dir.join("poses.json"))?;
    let template: BodyTemplate = read_json(&dir.join("template.json"))?;
    if cameras.len() != meta.cameras {
        return Err(CoreError::CountMismatch { what: "cameras.json entries".into(), expected: meta.cameras, found: cameras.len() });
    }
    if poses.len() != meta.frames {
        return Err(CoreError::CountMismatch { what: "poses.json entries".into(), expected: meta.frames, found: poses.len() });
    }
    template.validate()?;
    for (f, p) in poses.iter().enumerate() {
        if p.frame != f {
            return Err(CoreError::Invalid(format!("poses.json entry {f} has frame {}", p.frame)));
        }
        p.validate(template.joint_count())?;
    }
    for c in &cameras {
        c.validate()?;
        if (c.width, c.height) != (meta.width, meta.height) {
            return Err(CoreError::Invalid(format!("camera is {}x{}, meta says {}x{}", c.width, c.height, meta.width, meta.height)));
        }
    }
    for (name, n) in [("images", meta.cameras), ("masks", meta.cameras)] {
        let sub = dir.join(name);
        if !sub.is_dir() {
            return Err(CoreError::MissingFile(sub));
        }
        let found = fs::read_dir(&sub).map_err(|e| CoreError::io(&sub, e))?.filter(|e| e.as_ref().is_ok_and(|e| e.path().is_dir())).count();
        if found != n {
            return Err(CoreError::CountMismatch { what: format!("{name} camera directories"), expected: n, found });
        }
    }
    let (w, h) = (meta.width, meta.height);
    let jobs: Vec<(usize, usize)> = (0..meta.cameras).flat_map(|c| (0..meta.frames).map(move |f| (c, f))).collect();
    let loaded: Vec<(Vec<f32>, Vec<u8>)> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let rgb = read_png(&image_path(dir, c, f), png::ColorType::Rgb, w, h)?;
            let mask = read_png(&mask_path(dir, c, f), png::ColorType::Grayscale, w, h)?;
            Ok((rgb.into_iter().map(|b| b as f32 / 255.0).collect(), mask))
        })
        .collect::<Result<_>>()?;
    let (images, masks) = loaded.into_iter().unzip();
    Ok(Dataset { meta, cameras, poses, template, images, masks })
}
