//! End-to-end training loop, checkpoints and evaluation.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slrf_tensor::{checkpoint, Adam, AdamConfig, Array, Gradients, Tape};

use crate::body::BodyTemplate;
use crate::dataset::{self, Dataset};
use crate::fields::DensityActivation;
use crate::losses::{self, LossValues, LossWeights};
use crate::metrics::{self, BBOX_DILATION};
use crate::model::{self, Ablation, FieldPath, FrameInput, Model, ModelConfig};
use crate::render::{self, Background, RayBatch, RenderOptions};
use crate::{cvae, fields, CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Reconstruction error averaged over the rays of a batch.
    #[default]
    Mean,
    /// Summed over rays.
    Sum,
}

/// Training configuration. Hyperparameters carry their table names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub number_of_nodes: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub lambda_rec: f64,
    pub lambda_trans: f64,
    pub lambda_ebd: f64,
    pub lambda_kl: f64,
    pub dimension_of_e: usize,
    pub dimension_of_z: usize,
    pub number_of_ray_samples_per_batch: usize,
    pub number_of_point_samples_per_ray: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub learning_rate_decay_every: u64,
    pub learning_rate_decay_factor: f64,
    pub iterations: u64,
    pub seed: u64,
    pub residual_bound: Option<f64>,
    pub density_activation: DensityActivation,
    pub learnable_attention: bool,
    pub ablation: Ablation,
    /// Share of rays drawn from mask pixels; the rest come from background
    /// pixels inside the dilated mask box.
    pub foreground_fraction: f64,
    pub reconstruction_reduction: Reduction,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    /// Views rendered at each checkpoint to track the best model.
    pub eval_views: usize,
    /// Independent ray shards per iteration; gradients are summed in shard
    /// order, so results do not depend on the thread count.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            number_of_nodes: 128,
            sigma: 0.05,
            epsilon: 0.001,
            lambda_rec: 1.0,
            lambda_trans: 0.02,
            lambda_ebd: 0.1,
            lambda_kl: 1e-5,
            dimension_of_e: fields::EMBED_DIM,
            dimension_of_z: cvae::LATENT_DIM,
            number_of_ray_samples_per_batch: 2048,
            number_of_point_samples_per_ray: 64,
            batch_size: 4,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            learning_rate_decay_every: 20_000,
            learning_rate_decay_factor: 0.5,
            iterations: 20_000,
            seed: 0,
            residual_bound: Some(0.25),
            density_activation: DensityActivation::Softplus,
            learnable_attention: false,
            ablation: Ablation::default(),
            foreground_fraction: 0.8,
            reconstruction_reduction: Reduction::Mean,
            checkpoint_every: 1000,
            keep_checkpoints: 3,
            eval_views: 4,
            shards: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let c: Self = dataset::read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.dimension_of_e != fields::EMBED_DIM {
            return bad(format!("dimension_of_e must be {}, got {}", fields::EMBED_DIM, self.dimension_of_e));
        }
        if self.dimension_of_z != cvae::LATENT_DIM {
            return bad(format!("dimension_of_z must be {}, got {}", cvae::LATENT_DIM, self.dimension_of_z));
        }
        for (name, v) in [
            ("number_of_nodes", self.number_of_nodes),
            ("number_of_ray_samples_per_batch", self.number_of_ray_samples_per_batch),
            ("number_of_point_samples_per_ray", self.number_of_point_samples_per_ray),
            ("batch_size", self.batch_size),
            ("shards", self.shards),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.sigma > 0.0) || !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("need sigma > 0 and 0 < epsilon < 1, got {} and {}", self.sigma, self.epsilon));
        }
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_trans", self.lambda_trans),
            ("lambda_ebd", self.lambda_ebd),
            ("lambda_kl", self.lambda_kl),
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
            ("learning_rate_decay_factor", self.learning_rate_decay_factor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return bad(format!("foreground_fraction must be in [0, 1], got {}", self.foreground_fraction));
        }
        if self.keep_checkpoints == 0 {
            return bad("keep_checkpoints must be positive".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { rec: self.lambda_rec, trans: self.lambda_trans, ebd: self.lambda_ebd, kl: self.lambda_kl }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_epsilon,
            decay_factor: self.learning_rate_decay_factor,
            decay_every: self.learning_rate_decay_every,
        }
    }

    pub fn model_config(&self, joints: usize, frames: usize) -> ModelConfig {
        ModelConfig {
            num_nodes: self.number_of_nodes,
            num_joints: joints,
            sigma: self.sigma,
            epsilon: self.epsilon,
            residual_bound: self.residual_bound,
            density_activation: self.density_activation,
            learnable_attention: self.learnable_attention,
            ablation: self.ablation,
            num_frames: frames,
            init_seed: self.seed,
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: u64,
    pub loss: LossValues,
    /// Batch PSNR from the reconstruction term (capped).
    pub psnr: f64,
    /// Root mean square of residual translations and embeddings.
    pub dn_rms: f64,
    pub e_rms: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Sidecar stored next to every checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub template: BodyTemplate,
    /// Mean replay PSNR on the tracking views, when evaluated.
    pub psnr: Option<f64>,
}

const OPT_PREFIX: &str = "opt.";

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

/// Loads model parameters and metadata from a checkpoint and its sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let (model, meta, _) = load_full(path)?;
    Ok((model, meta))
}

fn load_full(path: &Path) -> Result<(Model<f32>, CheckpointMeta, Vec<(String, Array<f32>)>)> {
    if !path.is_file() {
        return Err(CoreError::MissingFile(path.into()));
    }
    let meta: CheckpointMeta = dataset::read_json(&sidecar_path(path))?;
    let records = checkpoint::load(path)?;
    let (opt, params): (Vec<_>, Vec<_>) = records.into_iter().partition(|(k, _)| k.starts_with(OPT_PREFIX));
    let mut model = Model::new(meta.model.clone(), meta.template.clone())?;
    model.load_params(params)?;
    let opt = opt.into_iter().map(|(k, v)| (k[OPT_PREFIX.len()..].to_string(), v)).collect();
    Ok((model, meta, opt))
}

/// Pixel pools per image for ray sampling.
struct PixelPools {
    foreground: Vec<(u32, u32)>,
    background: Vec<(u32, u32)>,
}

fn pixel_pools(data: &Dataset) -> Vec<PixelPools> {
    let (w, h) = (data.meta.width, data.meta.height);
    data.masks
        .iter()
        .map(|mask| {
            let bb = metrics::mask_bbox(mask, w, h, BBOX_DILATION);
            let mut pools = PixelPools { foreground: Vec::new(), background: Vec::new() };
            for v in bb.y0..bb.y1 {
                for u in bb.x0..bb.x1 {
                    if mask[(v * w + u) as usize] > 0 {
                        pools.foreground.push((u, v));
                    } else {
                        pools.background.push((u, v));
                    }
                }
            }
            pools
        })
        .collect()
}

struct Shard {
    rays: RayBatch,
    targets: Vec<f32>,
}

struct Prepared {
    frames: Vec<FrameInput>,
    shards: Vec<Shard>,
    total_rays: usize,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    data: &'a Dataset,
    model: Model<f32>,
    adam: Adam<f32>,
    out: PathBuf,
    pools: Vec<PixelPools>,
    iteration: u64,
    best: Option<f64>,
    eval_views: Vec<(usize, usize)>,
}

impl<'a> Trainer<'a> {
    /// Fresh run writing under `out`.
    pub fn new(config: TrainConfig, data: &'a Dataset, out: &Path) -> Result<Self> {
        config.validate()?;
        let mc = config.model_config(data.template.joint_count(), data.meta.frames);
        let model = Model::new(mc, data.template.clone())?;
        let adam = Adam::new(config.adam());
        Self::assemble(config, data, out, model, adam, 0, None)
    }

    /// Continues from the newest checkpoint under `out`.
    pub fn resume(config: TrainConfig, data: &'a Dataset, out: &Path) -> Result<Self> {
        config.validate()?;
        let latest = list_checkpoints(out)?
            .pop()
            .ok_or_else(|| CoreError::MissingFile(out.join("checkpoints")))?;
        let (model, meta, opt) = load_full(&latest)?;
        if meta.model != config.model_config(data.template.joint_count(), data.meta.frames) {
            return Err(CoreError::Config("resumed checkpoint does not match the configuration".into()));
        }
        let adam = Adam::import(config.adam(), meta.iteration, opt)?;
        let best = best_meta(out)?.and_then(|m| m.psnr);
        let t = Self::assemble(config, data, out, model, adam, meta.iteration, best)?;
        t.truncate_log()?;
        Ok(t)
    }

    fn assemble(
        config: TrainConfig,
        data: &'a Dataset,
        out: &Path,
        model: Model<f32>,
        adam: Adam<f32>,
        iteration: u64,
        best: Option<f64>,
    ) -> Result<Self> {
        if data.template != model.template {
            return Err(CoreError::Config("dataset template differs from the model template".into()));
        }
        fs::create_dir_all(out.join("checkpoints")).map_err(|e| CoreError::io(out, e))?;
        let total = data.meta.cameras * data.meta.frames;
        let n = config.eval_views.min(total);
        // Spread tracking views over cameras and frames.
        let eval_views = (0..n)
            .map(|k| {
                let idx = k * total / n.max(1);
                let cam = k % data.meta.cameras;
                (cam, idx % data.meta.frames)
            })
            .collect();
        Ok(Self { pools: pixel_pools(data), config, data, model, adam, out: out.into(), iteration, best, eval_views })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn log_path(&self) -> PathBuf {
        self.out.join("train_log.jsonl")
    }

    fn truncate_log(&self) -> Result<()> {
        let path = self.log_path();
        let Ok(file) = fs::File::open(&path) else { return Ok(()) };
        let mut kept = String::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| CoreError::io(&path, e))?;
            let entry: IterLog =
                serde_json::from_str(&line).map_err(|e| CoreError::MalformedJson { path: path.clone(), source: e })?;
            if entry.iter <= self.iteration {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
        render::atomic_write(&path, kept.as_bytes())
    }

    fn prepare(&self, iter: u64) -> Result<Prepared> {
        let c = &self.config;
        let data = self.data;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(iter);
        let t = data.meta.frames;
        let b = c.batch_size.min(t);
        let frames_idx: Vec<usize> = index::sample(&mut rng, t, b).into_vec();
        let n = self.model.num_nodes();
        let frames: Vec<FrameInput> = frames_idx
            .iter()
            .map(|&f| FrameInput::train(data.poses[f].clone(), model::standard_normal(&mut rng, n * cvae::LATENT_DIM)))
            .collect();
        let total_rays = c.number_of_ray_samples_per_batch;
        let s = c.number_of_point_samples_per_ray;
        let mut shards: Vec<Shard> = (0..c.shards).map(|_| Shard { rays: RayBatch::new(s), targets: Vec::new() }).collect();
        for r in 0..total_rays {
            let slot = r % b;
            let frame = frames_idx[slot];
            let cam = rng.random_range(0..data.meta.cameras);
            let k = data.index(cam, frame);
            let pools = &self.pools[k];
            let use_fg = pools.background.is_empty() || (!pools.foreground.is_empty() && rng.random::<f64>() < c.foreground_fraction);
            let pool = if use_fg { &pools.foreground } else { &pools.background };
            let (u, v) = pool[rng.random_range(0..pool.len())];
            let camera = &data.cameras[cam];
            let ray = render::generate_rays(camera, &[(u, v)])?[0];
            let shard = &mut shards[r * c.shards / total_rays];
            shard.rays.push(&ray, slot, camera.near, camera.far, Some(&mut rng));
            let px = 3 * (v * data.meta.width + u) as usize;
            shard.targets.extend_from_slice(&data.images[k][px..px + 3]);
        }
        Ok(Prepared { frames, shards, total_rays })
    }

    /// Loss and gradients of one shard. Regularizers are attached to shard 0.
    fn shard_grads(&self, prep: &Prepared, k: usize) -> Result<(LossValues, Gradients<f32>, f64, f64)> {
        let shard = &prep.shards[k];
        let mut tape = Tape::new();
        let pv = self.model.params.register(&mut tape, true);
        let lat = self.model.latents(&mut tape, &pv, &prep.frames)?;
        let out = self.model.field_pass(&mut tape, &pv, &lat, &shard.rays, FieldPath::Sparse)?;
        let rgb = tape.slice_cols(out.rgba, 0, 3)?;
        let target = tape.constant(Array::new([shard.rays.len(), 3], shard.targets.clone())?);
        let d = tape.sub(rgb, target)?;
        let sq = tape.square(d)?;
        let sum = tape.sum(sq)?;
        let scale = match self.config.reconstruction_reduction {
            Reduction::Mean => 1.0 / prep.total_rays as f64,
            Reduction::Sum => 1.0,
        };
        let rec = tape.scale(sum, scale as f32)?;
        let mut values = LossValues { rec: tape.value(rec).data()[0] as f64, ..LossValues::default() };
        let w = self.config.weights();
        let mut total = tape.scale(rec, w.rec as f32)?;
        let (mut dn_rms, mut e_rms) = (0.0, 0.0);
        if k == 0 {
            let rms = |a: &Array<f32>| (a.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64).sqrt();
            dn_rms = lat.dn.map_or(0.0, |v| rms(tape.value(v)));
            e_rms = lat.e.map_or(0.0, |v| rms(tape.value(v)));
            let reg = losses::regularizers(&mut tape, &w, &lat)?;
            let v = reg.values(&tape);
            values.trans = v.trans;
            values.ebd = v.ebd;
            values.kl = v.kl;
            if let Some(r) = reg.total {
                total = tape.add(total, r)?;
            }
        }
        values.total = tape.value(total).data()[0] as f64;
        let mut vg = tape.backward(total)?;
        Ok((values, pv.collect(&mut vg), dn_rms, e_rms))
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<IterLog> {
        let start = Instant::now();
        let iter = self.iteration + 1;
        let prep = self.prepare(iter)?;
        let results: Vec<Result<(LossValues, Gradients<f32>, f64, f64)>> =
            (0..prep.shards.len()).into_par_iter().map(|k| self.shard_grads(&prep, k)).collect();
        let mut loss = LossValues::default();
        let mut grads: Option<Gradients<f32>> = None;
        let (mut dn_rms, mut e_rms) = (0.0, 0.0);
        for (k, r) in results.into_iter().enumerate() {
            let (v, g, dn, e) = r?;
            loss.total += v.total;
            loss.rec += v.rec;
            if k == 0 {
                (loss.trans, loss.ebd, loss.kl, dn_rms, e_rms) = (v.trans, v.ebd, v.kl, dn, e);
            }
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (name, a) in acc.iter_mut() {
                        if let Some(b) = g.get(name) {
                            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += *y);
                        }
                    }
                }
            }
        }
        if !loss.total.is_finite() {
            return Err(CoreError::Numerical(format!("non-finite loss at iteration {iter}: {loss:?}")));
        }
        let grads = grads.unwrap_or_default();
        self.adam.update(&mut self.model.params, &grads).map_err(|e| match e {
            slrf_tensor::TensorError::NonFiniteGradient(name) => {
                CoreError::Numerical(format!("non-finite gradient for `{name}` at iteration {iter}"))
            }
            other => other.into(),
        })?;
        self.iteration = iter;
        let mse = match self.config.reconstruction_reduction {
            Reduction::Mean => loss.rec / 3.0,
            Reduction::Sum => loss.rec / (3.0 * prep.total_rays as f64),
        };
        let psnr = if mse > 0.0 { metrics::psnr_for_log(-10.0 * mse.log10()) } else { metrics::PSNR_LOG_CAP };
        Ok(IterLog {
            iter,
            loss,
            psnr,
            dn_rms,
            e_rms,
            lr: self.adam.lr_at(iter),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Trains until `until` iterations, logging every step and writing
    /// checkpoints. Always leaves a checkpoint for the final iteration.
    pub fn run(&mut self, until: u64, mut progress: impl FnMut(&IterLog)) -> Result<PathBuf> {
        let log_path = self.log_path();
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| CoreError::io(&log_path, e))?;
        let mut last = None;
        if self.iteration == 0 && list_checkpoints(&self.out)?.is_empty() {
            last = Some(self.save_checkpoint()?);
        }
        while self.iteration < until {
            let entry = self.step()?;
            let line = serde_json::to_string(&entry).map_err(|e| CoreError::MalformedJson { path: log_path.clone(), source: e })?;
            writeln!(log, "{line}").map_err(|e| CoreError::io(&log_path, e))?;
            progress(&entry);
            if self.config.checkpoint_every > 0 && self.iteration % self.config.checkpoint_every == 0 {
                last = Some(self.save_checkpoint()?);
            }
        }
        log.flush().map_err(|e| CoreError::io(&log_path, e))?;
        match last {
            Some(p) if p.file_stem() == Some(checkpoint_name(self.iteration).as_ref()) => Ok(p),
            _ => self.save_checkpoint(),
        }
    }

    /// Mean replay PSNR over the tracking views.
    pub fn tracking_psnr(&self) -> Result<f64> {
        if self.eval_views.is_empty() {
            return Ok(0.0);
        }
        let rows = evaluate(&self.model, self.data, &self.eval_views, self.config.number_of_point_samples_per_ray, false)?;
        Ok(rows.iter().map(|r| metrics::psnr_for_log(r.psnr)).sum::<f64>() / rows.len() as f64)
    }

    /// Writes `checkpoints/iter_XXXXXXX.slrf` plus sidecar, prunes old ones
    /// and refreshes `best.slrf`.
    pub fn save_checkpoint(&mut self) -> Result<PathBuf> {
        let dir = self.out.join("checkpoints");
        let path = dir.join(format!("{}.slrf", checkpoint_name(self.iteration)));
        let mut records = self.model.records();
        records.extend(self.adam.export().into_iter().map(|(k, v)| (format!("{OPT_PREFIX}{k}"), v)));
        checkpoint::save(&path, &records)?;
        let psnr = self.tracking_psnr()?;
        let meta = CheckpointMeta {
            iteration: self.iteration,
            model: self.model.config.clone(),
            train: self.config.clone(),
            template: self.model.template.clone(),
            psnr: Some(psnr),
        };
        write_meta(&sidecar_path(&path), &meta)?;
        if self.best.is_none_or(|b| psnr > b) {
            self.best = Some(psnr);
            let best = self.out.join("best.slrf");
            checkpoint::save(&best, &records)?;
            write_meta(&sidecar_path(&best), &meta)?;
        }
        let all = list_checkpoints(&self.out)?;
        if all.len() > self.config.keep_checkpoints {
            for old in &all[..all.len() - self.config.keep_checkpoints] {
                for p in [old.clone(), sidecar_path(old)] {
                    fs::remove_file(&p).map_err(|e| CoreError::io(&p, e))?;
                }
            }
        }
        Ok(path)
    }
}

fn checkpoint_name(iter: u64) -> String {
    format!("iter_{iter:07}")
}

fn write_meta(path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let s = serde_json::to_vec(meta).map_err(|e| CoreError::MalformedJson { path: path.into(), source: e })?;
    render::atomic_write(path, &s)
}

fn best_meta(out: &Path) -> Result<Option<CheckpointMeta>> {
    let p = sidecar_path(&out.join("best.slrf"));
    if p.is_file() {
        Ok(Some(dataset::read_json(&p)?))
    } else {
        Ok(None)
    }
}

/// Periodic checkpoints under `out/checkpoints`, oldest first.
pub fn list_checkpoints(out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join("checkpoints");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CoreError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "slrf"))
        .collect();
    v.sort();
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub camera: usize,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Replay renders of `views` (camera, frame) compared with ground truth
/// inside the dilated mask box. SSIM is skipped unless `with_ssim`.
pub fn evaluate<T: slrf_tensor::Real>(
    model: &Model<T>,
    data: &Dataset,
    views: &[(usize, usize)],
    samples: usize,
    with_ssim: bool,
) -> Result<Vec<EvalRow>> {
    let opts = RenderOptions { path: FieldPath::Sparse, background: Background::Black, samples, chunk: None };
    let (w, h) = (data.meta.width, data.meta.height);
    views
        .iter()
        .map(|&(camera, frame)| {
            if camera >= data.meta.cameras || frame >= data.meta.frames {
                return Err(CoreError::Invalid(format!("view (camera {camera}, frame {frame}) not in dataset")));
            }
            let img = render::render_image(model, &FrameInput::replay(data.poses[frame].clone()), &data.cameras[camera], &opts)?;
            let pred = img.rgb;
            let bb = metrics::mask_bbox(data.mask(camera, frame), w, h, BBOX_DILATION);
            let gt = data.image(camera, frame);
            let psnr = metrics::psnr(&pred, gt, w, bb);
            let ssim = if with_ssim { metrics::ssim(&pred, gt, w, h, bb) } else { f64::NAN };
            Ok(EvalRow { camera, frame, psnr, ssim })
        })
        .collect()
}

/// Every (camera, frame) pair of the dataset.
pub fn all_views(data: &Dataset) -> Vec<(usize, usize)> {
    (0..data.meta.cameras).flat_map(|c| (0..data.meta.frames).map(move |f| (c, f))).collect()
}

pub fn mean_psnr(rows: &[EvalRow]) -> f64 {
    rows.iter().map(|r| metrics::psnr_for_log(r.psnr)).sum::<f64>() / rows.len().max(1) as f64
}
