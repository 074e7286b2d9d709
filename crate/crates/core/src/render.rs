//! Cameras, ray sampling, node culling/packing, compositing and image output.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix4, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slrf_tensor::{Array, Real, Tape};

use crate::fields::cutoff_radius;
use crate::model::{FieldPath, FieldStats, FrameInput, Model};
use crate::{CoreError, Result};

/// Pinhole camera. Camera axes: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 rigid transform from camera to world coordinates.
    pub world_from_camera: [[f64; 4]; 4],
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, principal point at the image
    /// center.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], width: u32, height: u32, focal: f64, near: f64, far: f64) -> Self {
        let (eye_v, target_v, up_v) = (Vector3::from(eye), Vector3::from(target), Vector3::from(up));
        let forward = (target_v - eye_v).normalize();
        let right = forward.cross(&up_v).normalize();
        let down = forward.cross(&right);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r] = [right[r], down[r], forward[r], eye[r]];
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_from_camera: m,
            width,
            height,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near, self.far].iter().all(|x| x.is_finite())
            && self.world_from_camera.iter().flatten().all(|x| x.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || !(self.near > 0.0 && self.near < self.far) || self.width == 0 || self.height == 0 {
            return Err(CoreError::Invalid(format!("invalid camera {self:?}")));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.world_from_camera[r][c])
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.world_from_camera[0][3], self.world_from_camera[1][3], self.world_from_camera[2][3]]
    }

    /// Projects a world point to pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let inv = self.matrix().try_inverse()?;
        let q = crate::body::transform_point(&inv, p);
        (q[2] > 0.0).then(|| [self.fx * q[0] / q[2] + self.cx, self.fy * q[1] / q[2] + self.cy])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub pixel: (u32, u32),
}

/// Unit rays through pixel centers.
pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    let m = camera.matrix();
    let rot = m.fixed_view::<3, 3>(0, 0);
    let origin = camera.origin();
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= camera.width || v >= camera.height {
                return Err(CoreError::Invalid(format!("pixel ({u}, {v}) outside {}x{}", camera.width, camera.height)));
            }
            let d = Vector3::new((u as f64 + 0.5 - camera.cx) / camera.fx, (v as f64 + 0.5 - camera.cy) / camera.fy, 1.0);
            let w = (rot * d).normalize();
            Ok(Ray { origin, dir: [w.x, w.y, w.z], pixel: (u, v) })
        })
        .collect()
}

/// One depth per equal bin of `[near, far]`: the bin center, or a uniform
/// draw within the bin when `jitter` is given.
pub fn stratified_samples<R: Rng>(near: f64, far: f64, samples: usize, jitter: Option<&mut R>) -> Vec<f64> {
    let step = (far - near) / samples as f64;
    match jitter {
        None => (0..samples).map(|k| near + step * (k as f64 + 0.5)).collect(),
        Some(rng) => (0..samples).map(|k| near + step * (k as f64 + rng.random::<f64>())).collect(),
    }
}

/// Interval lengths: gaps to the next depth, `far - last` for the last one.
pub fn interval_lengths(depths: &[f64], far: f64) -> Vec<f64> {
    (0..depths.len()).map(|k| depths.get(k + 1).copied().unwrap_or(far) - depths[k]).collect()
}

/// Composites one ray over a black background. Returns `(rgb, alpha)`.
pub fn composite_ray(colors: &[[f64; 3]], densities: &[f64], depths: &[f64], far: f64) -> Result<([f64; 3], f64)> {
    let s = depths.len();
    if colors.len() != s || densities.len() != s {
        return Err(CoreError::Invalid("composite_ray inputs differ in length".into()));
    }
    let mut tape = Tape::<f64>::no_grad();
    let c = tape.constant(Array::new([1, s, 3], colors.iter().flatten().copied().collect())?);
    let d = tape.constant(Array::new([1, s], densities.to_vec())?);
    let out = tape.composite(c, d, Arc::new(interval_lengths(depths, far)), [0.0; 3])?;
    let v = tape.value(out).data();
    Ok(([v[0], v[1], v[2]], v[3]))
}

/// Surviving (sample, node) pairs after culling, ordered node-major with
/// ascending sample index within each node.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedQuery {
    /// Number of pairs per node (`S_i`).
    pub counts: Vec<usize>,
    /// `S' = max S_i`.
    pub s_prime: usize,
    /// Total number of samples considered.
    pub samples: usize,
    pub pair_node: Vec<usize>,
    pub pair_sample: Vec<usize>,
}

impl PackedQuery {
    pub fn pairs(&self) -> usize {
        self.pair_sample.len()
    }

    pub fn nodes(&self) -> usize {
        self.counts.len()
    }

    /// Lays per-pair rows out in the padded `N x S' x width` block with a
    /// validity mask.
    pub fn packed_block<T: Real>(&self, rows: &[T], width: usize) -> (Vec<T>, Vec<bool>) {
        let sp = self.s_prime;
        let mut block = vec![T::zero(); self.nodes() * sp * width];
        let mut mask = vec![false; self.nodes() * sp];
        let mut k = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            for slot in 0..c {
                let dst = (i * sp + slot) * width;
                block[dst..dst + width].copy_from_slice(&rows[k * width..(k + 1) * width]);
                mask[i * sp + slot] = true;
                k += 1;
            }
        }
        (block, mask)
    }

    /// Inverse of [`packed_block`](Self::packed_block) on valid entries.
    pub fn unpack_block<T: Real>(&self, block: &[T], width: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.pairs() * width);
        for (i, &c) in self.counts.iter().enumerate() {
            for slot in 0..c {
                let src = (i * self.s_prime + slot) * width;
                out.extend_from_slice(&block[src..src + width]);
            }
        }
        out
    }

    /// Padded packed entries over dense `N x S` entries.
    pub fn memory_ratio(&self) -> f64 {
        if self.samples == 0 {
            return 0.0;
        }
        self.s_prime as f64 / self.samples as f64
    }

    /// Unpadded surviving pairs over dense `N x S` pairs.
    pub fn pair_ratio(&self) -> f64 {
        if self.samples == 0 || self.nodes() == 0 {
            return 0.0;
        }
        self.pairs() as f64 / (self.samples * self.nodes()) as f64
    }

    fn from_pairs(nodes: usize, samples: usize, mut pairs: Vec<(usize, usize)>) -> Self {
        // Stable by node; samples were produced in ascending order.
        pairs.sort_by_key(|&(n, _)| n);
        let mut counts = vec![0; nodes];
        for &(n, _) in &pairs {
            counts[n] += 1;
        }
        let s_prime = counts.iter().copied().max().unwrap_or(0);
        let (pair_node, pair_sample) = pairs.into_iter().unzip();
        Self { counts, s_prime, samples, pair_node, pair_sample }
    }
}

/// Uniform grid over node positions, stored as cell-sorted node lists.
struct CellGrid {
    origin: [f64; 3],
    dims: [i64; 3],
    cell: f64,
    start: Vec<usize>,
    nodes: Vec<usize>,
}

impl CellGrid {
    fn new(members: &[(usize, [f64; 3])], cell: f64) -> Self {
        if members.is_empty() {
            return Self { origin: [0.0; 3], dims: [0; 3], cell, start: vec![0], nodes: Vec::new() };
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for (_, p) in members {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let dims = [0, 1, 2].map(|c| ((hi[c] - lo[c]) / cell).floor() as i64 + 1);
        let mut grid = Self { origin: lo, dims, cell, start: Vec::new(), nodes: Vec::new() };
        let ncells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut keyed: Vec<(usize, usize)> =
            members.iter().map(|&(i, p)| (grid.flat(grid.coords(p)).expect("member inside its own grid"), i)).collect();
        keyed.sort_unstable();
        grid.start = vec![0; ncells + 1];
        for &(c, _) in &keyed {
            grid.start[c + 1] += 1;
        }
        for c in 0..ncells {
            grid.start[c + 1] += grid.start[c];
        }
        grid.nodes = keyed.into_iter().map(|(_, i)| i).collect();
        grid
    }

    fn coords(&self, p: [f64; 3]) -> [i64; 3] {
        [0, 1, 2].map(|c| ((p[c] - self.origin[c]) / self.cell).floor() as i64)
    }

    fn flat(&self, c: [i64; 3]) -> Option<usize> {
        if (0..3).all(|k| (0..self.dims[k]).contains(&c[k])) {
            Some(((c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]) as usize)
        } else {
            None
        }
    }

    /// Calls `f` for every node in the 27 cells around `p`, in cell order.
    fn for_neighbors(&self, p: [f64; 3], mut f: impl FnMut(usize)) {
        let c = self.coords(p);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(k) = self.flat([c[0] + dx, c[1] + dy, c[2] + dz]) {
                        self.nodes[self.start[k]..self.start[k + 1]].iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }
}

/// Keeps pairs whose truncated Gaussian weight is positive, i.e. with the
/// sample inside the node's cutoff radius.
///
/// `posed` holds node positions node-major per frame (row `i * frames + f`);
/// `sample_frame` selects the frame of each sample and `active` masks out
/// (node, frame) rows that must be skipped.
#[allow(clippy::too_many_arguments)]
pub fn cull_and_pack<T: Real>(
    points: &[[T; 3]],
    sample_frame: &[usize],
    posed: &[[T; 3]],
    active: &[bool],
    frames: usize,
    sigma: f64,
    eps: f64,
) -> PackedQuery {
    let nodes = posed.len() / frames.max(1);
    let cell = cutoff_radius(sigma, eps) * 1.01;
    let grids: Vec<CellGrid> = (0..frames)
        .map(|f| {
            let members: Vec<(usize, [f64; 3])> = (0..nodes)
                .filter(|&i| active[i * frames + f])
                .map(|i| {
                    let n = posed[i * frames + f];
                    (i, [n[0].as_f64(), n[1].as_f64(), n[2].as_f64()])
                })
                .collect();
            CellGrid::new(&members, cell)
        })
        .collect();
    let k = T::lit(1.0 / (2.0 * sigma * sigma));
    let e = T::lit(eps);
    let mut pairs = Vec::new();
    for (s, p) in points.iter().enumerate() {
        let f = sample_frame[s];
        grids[f].for_neighbors([p[0].as_f64(), p[1].as_f64(), p[2].as_f64()], |i| {
            let d2 = slrf_tensor::row_sq_dist(p, &posed[i * frames + f]);
            if slrf_tensor::trunc_gauss(d2, k, e) > T::zero() {
                pairs.push((i, s));
            }
        });
    }
    PackedQuery::from_pairs(nodes, points.len(), pairs)
}

/// Every (sample, node) pair of the sample's frame, skipping inactive rows.
pub fn dense_pairs(samples: usize, sample_frame: &[usize], active: &[bool], nodes: usize, frames: usize) -> PackedQuery {
    let mut pairs = Vec::with_capacity(samples * nodes);
    for i in 0..nodes {
        for s in 0..samples {
            if active[i * frames + sample_frame[s]] {
                pairs.push((i, s));
            }
        }
    }
    PackedQuery::from_pairs(nodes, samples, pairs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    #[default]
    Black,
    White,
    Checker,
}

impl Background {
    pub fn color(self, u: u32, v: u32) -> [f64; 3] {
        match self {
            Background::Black => [0.0; 3],
            Background::White => [1.0; 3],
            Background::Checker => {
                if ((u / 8) + (v / 8)).is_multiple_of(2) {
                    [0.8; 3]
                } else {
                    [0.4; 3]
                }
            }
        }
    }
}

/// Quantizes `[0, 1]` floats to 8 bits.
pub fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB or RGBA PNG atomically (temp file then rename).
pub fn write_png(path: &Path, width: u32, height: u32, rgb: &[f32], alpha: Option<&[f32]>) -> Result<()> {
    let n = (width * height) as usize;
    if rgb.len() != 3 * n || alpha.is_some_and(|a| a.len() != n) {
        return Err(CoreError::Invalid(format!("image buffer does not match {width}x{height}")));
    }
    let data: Vec<u8> = match alpha {
        None => rgb.iter().map(|&x| to_u8(x as f64)).collect(),
        Some(a) => (0..n)
            .flat_map(|k| [rgb[3 * k], rgb[3 * k + 1], rgb[3 * k + 2], a[k]])
            .map(|x| to_u8(x as f64))
            .collect(),
    };
    let color = if alpha.is_some() { png::ColorType::Rgba } else { png::ColorType::Rgb };
    write_png_bytes(path, width, height, color, &data)
}

pub(crate) fn write_png_bytes(path: &Path, width: u32, height: u32, color: png::ColorType, data: &[u8]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| CoreError::Image { path: path.into(), detail: e.to_string() })?;
        w.write_image_data(data).map_err(|e| CoreError::Image { path: path.into(), detail: e.to_string() })?;
    }
    atomic_write(path, &buf)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CoreError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

/// Rays with their sample depths, flattened for one field pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    /// Index into the frames of the latent batch.
    pub frame: Vec<usize>,
    pub samples: usize,
    /// `len * samples` depths, ray-major.
    pub depths: Vec<f64>,
    pub far: Vec<f64>,
}

impl RayBatch {
    pub fn new(samples: usize) -> Self {
        Self { samples, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Appends a ray with stratified depths in `[near, far]`.
    pub fn push<R: Rng>(&mut self, ray: &Ray, frame: usize, near: f64, far: f64, jitter: Option<&mut R>) {
        self.origins.push(ray.origin);
        self.dirs.push(ray.dir);
        self.frame.push(frame);
        self.depths.extend(stratified_samples(near, far, self.samples, jitter));
        self.far.push(far);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub path: FieldPath,
    pub background: Background,
    pub samples: usize,
    /// Rays per tape; `None` picks a size from the path and node count.
    pub chunk: Option<usize>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { path: FieldPath::Sparse, background: Background::Black, samples: 64, chunk: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB already composited over the background.
    pub rgb: Vec<f32>,
    pub alpha: Vec<f32>,
    pub stats: FieldStats,
}

impl RenderedImage {
    pub fn write_png(&self, path: &Path, with_alpha: bool) -> Result<()> {
        write_png(path, self.width, self.height, &self.rgb, with_alpha.then_some(&self.alpha[..]))
    }
}

/// Renders a full image of one frame. Latents are evaluated once, then ray
/// chunks run in parallel on independent tapes.
pub fn render_image<T: Real>(model: &Model<T>, frame: &FrameInput, camera: &Camera, opts: &RenderOptions) -> Result<RenderedImage> {
    camera.validate()?;
    if opts.samples == 0 {
        return Err(CoreError::Config("samples per ray must be positive".into()));
    }
    let latents = {
        let mut tape = Tape::no_grad();
        let pv = model.params.register(&mut tape, false);
        let lat = model.latents(&mut tape, &pv, std::slice::from_ref(frame))?;
        lat.values(&tape)
    };
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<(u32, u32)> = (0..h).flat_map(|v| (0..w).map(move |u| (u, v))).collect();
    let rays = generate_rays(camera, &pixels)?;
    let chunk = opts.chunk.unwrap_or(match opts.path {
        FieldPath::Dense => (131_072 / (opts.samples * model.num_nodes()).max(1)).max(1),
        FieldPath::Sparse => 512,
    });
    let results: Vec<Result<(Vec<T>, FieldStats)>> = rays
        .par_chunks(chunk)
        .map(|chunk| {
            let mut batch = RayBatch::new(opts.samples);
            for r in chunk {
                batch.push::<rand_chacha::ChaCha8Rng>(r, 0, camera.near, camera.far, None);
            }
            let mut tape = Tape::no_grad();
            let pv = model.params.register(&mut tape, false);
            let lat = latents.to_vars(&mut tape);
            let out = model.field_pass(&mut tape, &pv, &lat, &batch, opts.path)?;
            Ok((tape.value(out.rgba).data().to_vec(), out.stats))
        })
        .collect();
    let n = pixels.len();
    let mut rgb = Vec::with_capacity(3 * n);
    let mut alpha = Vec::with_capacity(n);
    let mut stats = FieldStats::default();
    let (mut packed, mut dense) = (0usize, 0usize);
    for res in results {
        let (vals, s) = res?;
        for px in vals.chunks_exact(4) {
            let k = alpha.len();
            let bg = opts.background.color(pixels[k].0, pixels[k].1);
            let a = px[3].as_f64();
            for c in 0..3 {
                rgb.push((px[c].as_f64() + (1.0 - a) * bg[c]) as f32);
            }
            alpha.push(a as f32);
        }
        stats.samples += s.samples;
        stats.pairs += s.pairs;
        stats.occupied += s.occupied;
        stats.s_prime = stats.s_prime.max(s.s_prime);
        stats.skipped_singular = s.skipped_singular;
        packed += s.s_prime;
        dense += s.samples;
    }
    if dense > 0 {
        stats.memory_ratio = packed as f64 / dense as f64;
        stats.pair_ratio = stats.pairs as f64 / (dense * model.num_nodes()) as f64;
    }
    Ok(RenderedImage { width: w, height: h, rgb, alpha, stats })
}
