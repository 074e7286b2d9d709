//! The full avatar: template, nodes, parameters and the differentiable
//! forward pass from poses and rays to composited pixels.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::Matrix4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use slrf_tensor::{Array, ParamStore, ParamVars, Real, Segments, Tape, Var};

use crate::body::{self, AttentionMap, BodyTemplate, NodeSet, Pose};
use crate::cvae::{self, LATENT_DIM, TIME_ENC};
use crate::fields::{self, encoded_len, fourier_encode, DensityActivation, PairLayout, EMBED_DIM, M_TIME, M_VIEW};
use crate::render::{self, PackedQuery, RayBatch};
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Force residual node translations to zero.
    pub disable_residuals: bool,
    /// Force detail embeddings to zero.
    pub disable_embeddings: bool,
    /// Replace the cVAE by a pose-only MLP; no KL term.
    pub deterministic_regressor: bool,
    /// Replace the encoded time input by learnable per-frame codes.
    pub free_frame_latents: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_nodes: usize,
    pub num_joints: usize,
    pub sigma: f64,
    pub epsilon: f64,
    /// tanh bound on residual translations in meters; `None` disables it.
    pub residual_bound: Option<f64>,
    pub density_activation: DensityActivation,
    pub learnable_attention: bool,
    pub ablation: Ablation,
    /// Sequence length; sizes the per-frame codes.
    pub num_frames: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_nodes: 128,
            num_joints: 6,
            sigma: 0.05,
            epsilon: 0.001,
            residual_bound: Some(0.25),
            density_activation: DensityActivation::Softplus,
            learnable_attention: false,
            ablation: Ablation::default(),
            num_frames: 16,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// Sample `z` with caller-supplied noise.
    Train,
    /// `z = mu`.
    Replay,
    /// Encoder skipped; `z = 0` unless supplied.
    Novel,
}

#[derive(Clone, Debug)]
pub struct FrameInput {
    pub pose: Pose,
    pub mode: LatentMode,
    /// Standard normal noise, node-major `N x 8` (train mode).
    pub noise: Option<Vec<f64>>,
    /// Explicit latent, node-major `N x 8` (novel mode).
    pub z: Option<Vec<f64>>,
}

impl FrameInput {
    pub fn replay(pose: Pose) -> Self {
        Self { pose, mode: LatentMode::Replay, noise: None, z: None }
    }

    pub fn novel(pose: Pose, z: Option<Vec<f64>>) -> Self {
        Self { pose, mode: LatentMode::Novel, noise: None, z }
    }

    pub fn train(pose: Pose, noise: Vec<f64>) -> Self {
        Self { pose, mode: LatentMode::Train, noise: Some(noise), z: None }
    }

    /// Train-mode input with noise drawn from a generator seeded by `seed`.
    pub fn train_seeded(pose: Pose, nodes: usize, seed: u64) -> Self {
        Self::train(pose, standard_normal(&mut ChaCha8Rng::seed_from_u64(seed), nodes * LATENT_DIM))
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Pose-dependent constants of one frame.
#[derive(Clone, Debug)]
pub struct FrameGeometry {
    pub pose: Pose,
    /// Row-major 3x4 blended transform per node.
    pub transforms: Vec<[f64; 12]>,
    /// Exact inverse per node; `None` when the blend is singular.
    pub inverses: Vec<Option<Matrix4<f64>>>,
    /// Pose condition per node under the fixed attention map.
    pub condition: Vec<Vec<f64>>,
}

/// Per-frame latent quantities for a set of frames, node-major rows
/// (`i * frames + f`).
#[derive(Clone, Debug)]
pub struct LatentVars {
    pub frames: usize,
    pub mu: Option<Var>,
    pub logvar: Option<Var>,
    pub z: Option<Var>,
    pub dn: Option<Var>,
    pub e: Option<Var>,
    /// Canonical node positions plus residuals.
    pub cpd: Var,
    pub posed: Var,
    pub geometry: Arc<Vec<FrameGeometry>>,
}

/// Detached values of [`LatentVars`], reusable across tapes.
#[derive(Clone, Debug)]
pub struct LatentValues<T> {
    pub frames: usize,
    pub mu: Option<Array<T>>,
    pub logvar: Option<Array<T>>,
    pub z: Option<Array<T>>,
    pub dn: Option<Array<T>>,
    pub e: Option<Array<T>>,
    pub cpd: Array<T>,
    pub posed: Array<T>,
    pub geometry: Arc<Vec<FrameGeometry>>,
}

impl LatentVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LatentValues<T> {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        LatentValues {
            frames: self.frames,
            mu: get(self.mu),
            logvar: get(self.logvar),
            z: get(self.z),
            dn: get(self.dn),
            e: get(self.e),
            cpd: tape.value(self.cpd).clone(),
            posed: tape.value(self.posed).clone(),
            geometry: self.geometry.clone(),
        }
    }
}

impl<T: Real> LatentValues<T> {
    pub fn to_vars(&self, tape: &mut Tape<T>) -> LatentVars {
        let mut put = |a: &Option<Array<T>>| a.as_ref().map(|a| tape.constant(a.clone()));
        let (mu, logvar, z, dn, e) = (put(&self.mu), put(&self.logvar), put(&self.z), put(&self.dn), put(&self.e));
        LatentVars {
            frames: self.frames,
            mu,
            logvar,
            z,
            dn,
            e,
            cpd: tape.constant(self.cpd.clone()),
            posed: tape.constant(self.posed.clone()),
            geometry: self.geometry.clone(),
        }
    }
}

/// Latents of one frame, per node.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLatents {
    pub z: Vec<Vec<f64>>,
    /// Empty when the encoder was not run.
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub dn: Vec<[f64; 3]>,
    pub e: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldPath {
    Dense,
    #[default]
    Sparse,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldStats {
    pub samples: usize,
    pub pairs: usize,
    pub occupied: usize,
    pub s_prime: usize,
    pub memory_ratio: f64,
    pub pair_ratio: f64,
    pub skipped_singular: usize,
}

pub struct FieldOutput {
    /// `[R, 4]`: composited rgb over black, then alpha.
    pub rgba: Var,
    pub stats: FieldStats,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub template: BodyTemplate,
    pub nodes: NodeSet,
    pub attention: AttentionMap,
    pub params: ParamStore<T>,
    encoder_calls: Arc<AtomicU64>,
}

impl Model<f32> {
    /// Fresh model with randomly initialized parameters.
    pub fn new(config: ModelConfig, template: BodyTemplate) -> Result<Self> {
        template.validate()?;
        let j = template.joint_count();
        if config.num_joints != j {
            return Err(CoreError::Config(format!("config has {} joints, template has {j}", config.num_joints)));
        }
        if config.num_frames == 0 {
            return Err(CoreError::Config("num_frames must be positive".into()));
        }
        if let Some(b) = config.residual_bound {
            if !(b > 0.0) {
                return Err(CoreError::Config(format!("residual_bound must be positive, got {b}")));
            }
        }
        let nodes = body::sample_nodes(&template, config.num_nodes, config.sigma, config.epsilon)?;
        let attention = AttentionMap::from_tree(&template.joints);
        let n = config.num_nodes;
        let cond = 3 * j;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        fields::init_params(&mut params, &mut rng, n);
        if config.ablation.deterministic_regressor {
            cvae::init_decoder(&mut params, &mut rng, "regressor", n, cond);
        } else {
            cvae::init_encoder(&mut params, &mut rng, n, cond);
            cvae::init_decoder(&mut params, &mut rng, "cvae.dec", n, LATENT_DIM + cond);
            if config.ablation.free_frame_latents {
                let t = config.num_frames;
                let codes: Vec<f32> = (0..t)
                    .flat_map(|k| fourier_encode(&[k as f64 / t as f64], M_TIME))
                    .map(|x| x as f32)
                    .collect();
                params.insert("frame_codes", Array::new([t, TIME_ENC], codes)?);
            }
        }
        if config.learnable_attention {
            // softplus(raw) reproduces the fixed map up to a small floor.
            let raw: Vec<f32> = attention
                .w
                .iter()
                .flatten()
                .map(|&w| (w.max(1e-3).exp_m1()).ln() as f32)
                .collect();
            params.insert("attention.raw", Array::new([j, j], raw)?);
        }
        Ok(Self { config, template, nodes, attention, params, encoder_calls: Arc::new(AtomicU64::new(0)) })
    }

    /// Replaces the parameters with checkpoint records, checking names and
    /// shapes against the architecture.
    pub fn load_params(&mut self, records: Vec<(String, Array<f32>)>) -> Result<()> {
        let mut loaded = ParamStore::new();
        for (name, a) in records {
            let want = self.params.get(&name).map_err(|_| CoreError::Invalid(format!("unexpected parameter `{name}` in checkpoint")))?;
            if want.shape() != a.shape() {
                return Err(CoreError::Invalid(format!("parameter `{name}` has shape {:?}, expected {:?}", a.shape(), want.shape())));
            }
            loaded.insert(name, a);
        }
        for name in self.params.names() {
            if !loaded.contains(name) {
                return Err(CoreError::Invalid(format!("checkpoint lacks parameter `{name}`")));
            }
        }
        // Keep architecture order.
        let mut ordered = ParamStore::new();
        for name in self.params.names() {
            ordered.insert(name, loaded.get(name)?.clone());
        }
        self.params = ordered;
        Ok(())
    }

    pub fn records(&self) -> Vec<(String, Array<f32>)> {
        self.params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }
}

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            template: self.template.clone(),
            nodes: self.nodes.clone(),
            attention: self.attention.clone(),
            params: self.params.cast(),
            encoder_calls: self.encoder_calls.clone(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Times the encoder has been evaluated by this model (shared by casts).
    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn geometry(&self, pose: &Pose) -> Result<FrameGeometry> {
        let j = self.template.joint_count();
        pose.validate(j)?;
        let ms = body::joint_transforms(&self.template.joints, pose)?;
        let mut transforms = Vec::with_capacity(self.num_nodes());
        let mut inverses = Vec::with_capacity(self.num_nodes());
        let mut condition = Vec::with_capacity(self.num_nodes());
        for skin in &self.nodes.skin {
            let t = body::node_transform(skin, &ms)?;
            let mut m = [0.0; 12];
            for r in 0..3 {
                for c in 0..4 {
                    m[r * 4 + c] = t[(r, c)];
                }
            }
            transforms.push(m);
            inverses.push(t.try_inverse());
            condition.push(body::pose_condition(&pose.theta, skin, &self.attention));
        }
        Ok(FrameGeometry { pose: pose.clone(), transforms, inverses, condition })
    }

    /// Builds the per-node latent graph for `frames` (all sharing one mode).
    pub fn latents(&self, tape: &mut Tape<T>, pv: &ParamVars, frames: &[FrameInput]) -> Result<LatentVars> {
        let nf_frames = frames.len();
        if nf_frames == 0 {
            return Err(CoreError::Invalid("no frames given".into()));
        }
        let mode = frames[0].mode;
        if frames.iter().any(|f| f.mode != mode) {
            return Err(CoreError::Invalid("frames in one batch must share a latent mode".into()));
        }
        let n = self.num_nodes();
        let j = self.template.joint_count();
        let rows = n * nf_frames;
        let geometry: Vec<FrameGeometry> = frames.iter().map(|f| self.geometry(&f.pose)).collect::<Result<_>>()?;
        let segments = Arc::new(Segments::uniform(n, nf_frames));
        let node_of_row: Arc<Vec<usize>> = Arc::new((0..rows).map(|r| r / nf_frames).collect());
        let lit = |x: f64| T::lit(x);

        let cond = if self.config.learnable_attention {
            let raw = pv.get("attention.raw")?;
            let s = tape.softplus(raw)?;
            let rs = tape.sum_rows(s)?;
            let w = tape.div_rows(s, rs)?;
            let wt = tape.transpose(w)?;
            let omega: Vec<T> = self.nodes.skin.iter().flatten().map(|&x| lit(x)).collect();
            let omega = tape.constant(Array::new([n, j], omega)?);
            let a = tape.matmul(omega, wt)?;
            let expand: Vec<T> = (0..j * 3 * j).map(|k| if (k % (3 * j)) / 3 == k / (3 * j) { T::one() } else { T::zero() }).collect();
            let expand = tape.constant(Array::new([j, 3 * j], expand)?);
            let a = tape.matmul(a, expand)?;
            let a = tape.gather_rows(a, node_of_row.clone())?;
            let mut theta = Vec::with_capacity(rows * 3 * j);
            for r in 0..rows {
                let pose = &geometry[r % nf_frames].pose;
                theta.extend(pose.theta.iter().enumerate().map(|(k, &x)| if k < 3 { T::zero() } else { lit(x) }));
            }
            let theta = tape.constant(Array::new([rows, 3 * j], theta)?);
            tape.mul(a, theta)?
        } else {
            let mut c = Vec::with_capacity(rows * 3 * j);
            for r in 0..rows {
                c.extend(geometry[r % nf_frames].condition[r / nf_frames].iter().map(|&x| lit(x)));
            }
            tape.constant(Array::new([rows, 3 * j], c)?)
        };

        let ab = self.config.ablation;
        let bound = self.config.residual_bound;
        let (mut mu, mut logvar, mut z) = (None, None, None);
        let (dn, e) = if ab.deterministic_regressor {
            cvae::decoder(tape, pv, "regressor", cond, &segments, bound)?
        } else {
            let zv = match mode {
                LatentMode::Novel => {
                    let mut data = vec![T::zero(); rows * LATENT_DIM];
                    for (f, frame) in frames.iter().enumerate() {
                        if let Some(zf) = &frame.z {
                            if zf.len() != n * LATENT_DIM {
                                return Err(CoreError::CountMismatch { what: "latent z".into(), expected: n * LATENT_DIM, found: zf.len() });
                            }
                            for i in 0..n {
                                for d in 0..LATENT_DIM {
                                    data[(i * nf_frames + f) * LATENT_DIM + d] = lit(zf[i * LATENT_DIM + d]);
                                }
                            }
                        }
                    }
                    tape.constant(Array::new([rows, LATENT_DIM], data)?)
                }
                LatentMode::Train | LatentMode::Replay => {
                    let time = if ab.free_frame_latents {
                        let mut idx = Vec::with_capacity(rows);
                        for r in 0..rows {
                            let frame = geometry[r % nf_frames].pose.frame;
                            if frame >= self.config.num_frames {
                                return Err(CoreError::Invalid(format!(
                                    "frame {frame} has no learned code ({} frames)",
                                    self.config.num_frames
                                )));
                            }
                            idx.push(frame);
                        }
                        tape.gather_rows(pv.get("frame_codes")?, Arc::new(idx))?
                    } else {
                        let mut t = Vec::with_capacity(rows * TIME_ENC);
                        for r in 0..rows {
                            t.extend(fourier_encode(&[lit(geometry[r % nf_frames].pose.time_norm)], M_TIME));
                        }
                        tape.constant(Array::new([rows, TIME_ENC], t)?)
                    };
                    let input = tape.concat_cols(&[time, cond])?;
                    self.encoder_calls.fetch_add(1, Ordering::Relaxed);
                    let (m, lv) = cvae::encoder(tape, pv, input, &segments)?;
                    mu = Some(m);
                    logvar = Some(lv);
                    if mode == LatentMode::Train {
                        let mut data = vec![T::zero(); rows * LATENT_DIM];
                        for (f, frame) in frames.iter().enumerate() {
                            let noise = frame
                                .noise
                                .as_ref()
                                .ok_or_else(|| CoreError::Invalid("train mode requires noise".into()))?;
                            if noise.len() != n * LATENT_DIM {
                                return Err(CoreError::CountMismatch { what: "latent noise".into(), expected: n * LATENT_DIM, found: noise.len() });
                            }
                            for i in 0..n {
                                for d in 0..LATENT_DIM {
                                    data[(i * nf_frames + f) * LATENT_DIM + d] = lit(noise[i * LATENT_DIM + d]);
                                }
                            }
                        }
                        let noise = tape.constant(Array::new([rows, LATENT_DIM], data)?);
                        cvae::reparameterize(tape, m, lv, noise)?
                    } else {
                        m
                    }
                }
            };
            z = Some(zv);
            let input = tape.concat_cols(&[zv, cond])?;
            cvae::decoder(tape, pv, "cvae.dec", input, &segments, bound)?
        };
        let dn = (!ab.disable_residuals).then_some(dn);
        let e = (!ab.disable_embeddings).then_some(e);

        let canon: Vec<T> = (0..rows).flat_map(|r| self.nodes.positions[r / nf_frames]).map(lit).collect();
        let canon = tape.constant(Array::new([rows, 3], canon)?);
        let cpd = match dn {
            Some(dn) => tape.add(canon, dn)?,
            None => canon,
        };
        let mats: Vec<T> = (0..rows).flat_map(|r| geometry[r % nf_frames].transforms[r / nf_frames]).map(lit).collect();
        let posed = tape.affine_rows(cpd, Arc::new(mats))?;
        Ok(LatentVars { frames: nf_frames, mu, logvar, z, dn, e, cpd, posed, geometry: Arc::new(geometry) })
    }

    /// Evaluates the local fields along `rays` and composites them.
    pub fn field_pass(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        lat: &LatentVars,
        rays: &RayBatch,
        path: FieldPath,
    ) -> Result<FieldOutput> {
        let n = self.num_nodes();
        let nf_frames = lat.frames;
        let r_count = rays.len();
        let s_count = rays.samples;
        let p_count = r_count * s_count;
        let lit = |x: f64| T::lit(x);
        if rays.frame.iter().any(|&f| f >= nf_frames) {
            return Err(CoreError::Invalid("ray refers to a frame outside the batch".into()));
        }

        let mut points_f64 = Vec::with_capacity(p_count);
        for r in 0..r_count {
            let (o, d) = (rays.origins[r], rays.dirs[r]);
            for &t in &rays.depths[r * s_count..(r + 1) * s_count] {
                points_f64.push([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
            }
        }
        let points: Vec<[T; 3]> = points_f64.iter().map(|p| [lit(p[0]), lit(p[1]), lit(p[2])]).collect();
        let sample_frame: Vec<usize> = (0..p_count).map(|s| rays.frame[s / s_count]).collect();
        let posed_v = tape.value(lat.posed).data();
        let posed: Vec<[T; 3]> = (0..n * nf_frames).map(|k| [posed_v[3 * k], posed_v[3 * k + 1], posed_v[3 * k + 2]]).collect();
        let active: Vec<bool> = (0..n * nf_frames).map(|row| lat.geometry[row % nf_frames].inverses[row / nf_frames].is_some()).collect();
        let skipped_singular = active.iter().filter(|a| !**a).count();

        let query: PackedQuery = match path {
            FieldPath::Sparse => render::cull_and_pack(&points, &sample_frame, &posed, &active, nf_frames, self.nodes.sigma, self.nodes.eps),
            FieldPath::Dense => render::dense_pairs(p_count, &sample_frame, &active, n, nf_frames),
        };
        let pairs = query.pairs();
        let pair_latent: Vec<usize> = (0..pairs).map(|k| query.pair_node[k] * nf_frames + sample_frame[query.pair_sample[k]]).collect();

        let mut stats = FieldStats {
            samples: p_count,
            pairs,
            occupied: 0,
            s_prime: query.s_prime,
            memory_ratio: query.memory_ratio(),
            pair_ratio: query.pair_ratio(),
            skipped_singular,
        };

        let deltas: Vec<T> = (0..r_count)
            .flat_map(|r| render::interval_lengths(&rays.depths[r * s_count..(r + 1) * s_count], rays.far[r]))
            .map(lit)
            .collect();
        let deltas = Arc::new(deltas);

        // Occupancy from the same weight function the graph uses.
        let k = lit(1.0 / (2.0 * self.nodes.sigma * self.nodes.sigma));
        let eps = lit(self.nodes.eps);
        let mut occupied = vec![false; p_count];
        for (kk, &s) in query.pair_sample.iter().enumerate() {
            if !occupied[s] {
                let d2 = slrf_tensor::row_sq_dist(&points[s], &posed[pair_latent[kk]]);
                occupied[s] = slrf_tensor::trunc_gauss(d2, k, eps) > T::zero();
            }
        }
        let occupied_idx: Vec<usize> = (0..p_count).filter(|&s| occupied[s]).collect();
        stats.occupied = occupied_idx.len();

        if occupied_idx.is_empty() {
            let c = tape.constant(Array::zeros([r_count, s_count, 3]));
            let d = tape.constant(Array::zeros([r_count, s_count]));
            let rgba = tape.composite(c, d, deltas, [T::zero(); 3])?;
            return Ok(FieldOutput { rgba, stats });
        }

        let (targets, pair_target, target_sample) = match path {
            FieldPath::Sparse => {
                let mut slot = vec![usize::MAX; p_count];
                for (q, &s) in occupied_idx.iter().enumerate() {
                    slot[s] = q;
                }
                let pt: Vec<usize> = query.pair_sample.iter().map(|&s| slot[s]).collect();
                (occupied_idx.len(), pt, occupied_idx.clone())
            }
            FieldPath::Dense => (p_count, query.pair_sample.clone(), (0..p_count).collect()),
        };

        let layout = PairLayout {
            node_segments: Arc::new(Segments::from_counts(&query.counts)),
            latent_segments: Arc::new(Segments::uniform(n, nf_frames)),
            pair_latent: Arc::new(pair_latent),
            pair_target: Arc::new(pair_target),
            targets,
        };

        let mut q_local = Vec::with_capacity(pairs * 3);
        let mut p_pairs = Vec::with_capacity(pairs * 3);
        for kk in 0..pairs {
            let s = query.pair_sample[kk];
            let row = layout.pair_latent[kk];
            let inv = lat.geometry[row % nf_frames].inverses[row / nf_frames].as_ref().expect("inactive rows are culled");
            q_local.extend(body::transform_point(inv, points_f64[s]).map(lit));
            p_pairs.extend_from_slice(&points[s]);
        }
        let q_local = tape.constant(Array::new([pairs, 3], q_local)?);
        let p_pairs = tape.constant(Array::new([pairs, 3], p_pairs)?);

        let cpd_g = tape.gather_rows(lat.cpd, layout.pair_latent.clone())?;
        let local = tape.sub(q_local, cpd_g)?;
        let feats = fields::local_features(tape, pv, local, lat.e, &layout)?;
        let posed_g = tape.gather_rows(lat.posed, layout.pair_latent.clone())?;
        let d2 = tape.row_sq_dist(p_pairs, posed_g)?;
        let w = tape.trunc_gauss(d2, lit(self.nodes.sigma), eps)?;
        let fused = fields::fuse(tape, feats, w, &layout)?;

        let vw = encoded_len(3, M_VIEW);
        let ray_enc: Vec<Vec<T>> = rays.dirs.iter().map(|d| fourier_encode(&[lit(d[0]), lit(d[1]), lit(d[2])], M_VIEW)).collect();
        let mut venc = Vec::with_capacity(targets * vw);
        for &s in &target_sample {
            venc.extend_from_slice(&ray_enc[s / s_count]);
        }
        let venc = tape.constant(Array::new([targets, vw], venc)?);
        let (rgb, density) = fields::heads(tape, pv, fused, venc, self.config.density_activation)?;

        let (rgb, density) = match path {
            FieldPath::Sparse => {
                let idx = Arc::new(occupied_idx);
                (tape.scatter_add_rows(rgb, idx.clone(), p_count)?, tape.scatter_add_rows(density, idx, p_count)?)
            }
            FieldPath::Dense => {
                let mask: Vec<T> = occupied.iter().map(|&o| if o { T::one() } else { T::zero() }).collect();
                let mask = tape.constant(Array::new([p_count], mask)?);
                (tape.mul_rows(rgb, mask)?, tape.mul_rows(density, mask)?)
            }
        };
        let color = tape.reshape(rgb, &[r_count, s_count, 3])?;
        let density = tape.reshape(density, &[r_count, s_count])?;
        let rgba = tape.composite(color, density, deltas, [T::zero(); 3])?;
        Ok(FieldOutput { rgba, stats })
    }

    /// Latents of a single frame without recording gradients.
    pub fn infer_latents(&self, frame: &FrameInput) -> Result<FrameLatents> {
        let mut tape = Tape::no_grad();
        let pv = self.params.register(&mut tape, false);
        let lat = self.latents(&mut tape, &pv, std::slice::from_ref(frame))?;
        let n = self.num_nodes();
        let rows = |v: Option<Var>, w: usize| -> Vec<Vec<f64>> {
            v.map(|v| (0..n).map(|i| tape.value(v).row(i)[..w].iter().map(|x| x.as_f64()).collect()).collect())
                .unwrap_or_default()
        };
        let z = rows(lat.z, LATENT_DIM);
        let mu = rows(lat.mu, LATENT_DIM);
        let sigma = rows(lat.logvar, LATENT_DIM)
            .into_iter()
            .map(|r| r.into_iter().map(|l| (0.5 * l).exp()).collect())
            .collect();
        let dn = match lat.dn {
            Some(v) => (0..n).map(|i| {
                let r = tape.value(v).row(i);
                [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]
            }).collect(),
            None => vec![[0.0; 3]; n],
        };
        let e = match lat.e {
            Some(_) => rows(lat.e, EMBED_DIM),
            None => vec![vec![0.0; EMBED_DIM]; n],
        };
        Ok(FrameLatents { z, mu, sigma, dn, e })
    }
}
