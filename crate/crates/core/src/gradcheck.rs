//! End-to-end finite-difference check of the training loss gradient on a
//! tiny 64-bit configuration.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use slrf_tensor::{Array, Gradients, Tape};

use crate::body::{Humanoid, Pose};
use crate::losses::{self, LossWeights};
use crate::model::{self, Ablation, FieldPath, FrameInput, Model, ModelConfig};
use crate::render::{Ray, RayBatch};
use crate::{cvae, CoreError, Result};

pub const TINY_NODES: usize = 8;
pub const TINY_JOINTS: usize = 4;
pub const TINY_RAYS: usize = 16;
pub const TINY_SAMPLES: usize = 4;
pub const TINY_FRAMES: usize = 2;
pub const DEFAULT_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
const KINK_RATIO: f64 = 1e-5;
const KINK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    /// Group whose analytic gradient is deliberately scaled by 1.1.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { seed: 0, step: DEFAULT_STEP, corrupt: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupResult {
    pub group: String,
    /// `|fd - analytic| / max(|fd|, |analytic|)` over the checked
    /// coordinates (Euclidean norms).
    pub rel_err: f64,
    pub coordinates: usize,
    /// Coordinates left out because the loss has a kink within one step.
    pub skipped: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }
}

/// Parameter group of a tensor name.
pub fn group_of(name: &str) -> &str {
    for g in ["cvae.enc", "cvae.dec"] {
        if name.starts_with(g) {
            return g;
        }
    }
    name.split('.').next().unwrap_or(name)
}

struct Problem {
    model: Model<f64>,
    frames: Vec<FrameInput>,
    rays: RayBatch,
    targets: Vec<f64>,
    weights: LossWeights,
}

impl Problem {
    fn new(seed: u64, ablation: Ablation, learnable_attention: bool) -> Result<Self> {
        let template = Humanoid::new(TINY_JOINTS)?.template();
        let config = ModelConfig {
            num_nodes: TINY_NODES,
            num_joints: TINY_JOINTS,
            ablation,
            learnable_attention,
            num_frames: TINY_FRAMES,
            init_seed: seed,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config, template)?.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        // Nonzero biases so every layer's bias gradient is exercised.
        let names: Vec<String> = model.params.names().map(String::from).collect();
        for n in names.iter().filter(|n| n.ends_with(".b")) {
            for x in model.params.get_mut(n)?.data_mut() {
                *x = rng.random_range(-0.1..0.1);
            }
        }
        let frames: Vec<FrameInput> = (0..TINY_FRAMES)
            .map(|f| {
                let mut pose = Pose::rest(TINY_JOINTS);
                pose.frame = f;
                pose.time_norm = f as f64 / TINY_FRAMES as f64;
                for x in pose.theta.iter_mut() {
                    *x = rng.random_range(-0.3..0.3);
                }
                FrameInput::train(pose, model::standard_normal(&mut rng, TINY_NODES * cvae::LATENT_DIM))
            })
            .collect();
        // Aim each ray through a posed node so every sample sees some nodes.
        let posed: Vec<Vec<[f64; 3]>> = frames
            .iter()
            .map(|f| {
                let g = model.geometry(&f.pose)?;
                Ok(model
                    .nodes
                    .positions
                    .iter()
                    .zip(&g.transforms)
                    .map(|(p, m)| {
                        let row = |r: usize| m[4 * r] * p[0] + m[4 * r + 1] * p[1] + m[4 * r + 2] * p[2] + m[4 * r + 3];
                        [row(0), row(1), row(2)]
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut rays = RayBatch::new(TINY_SAMPLES);
        let mut targets = Vec::with_capacity(3 * TINY_RAYS);
        for k in 0..TINY_RAYS {
            let f = k % TINY_FRAMES;
            let node = posed[f][k % TINY_NODES];
            let dir: [f64; 3] = {
                let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
                v.map(|x| x / n)
            };
            let jitter = [0.02, -0.01, 0.015];
            let origin = [0, 1, 2].map(|c| node[c] + jitter[c] - 0.5 * dir[c]);
            let ray = Ray { origin, dir, pixel: (0, 0) };
            rays.push(&ray, f, 0.35, 0.65, Some(&mut rng));
            targets.extend((0..3).map(|_| rng.random_range(0.0..1.0)));
        }
        Ok(Self { model, frames, rays, targets, weights: LossWeights::default() })
    }

    fn loss(&self, with_grad: bool) -> Result<(f64, Option<Gradients<f64>>)> {
        let mut tape = if with_grad { Tape::new() } else { Tape::no_grad() };
        let pv = self.model.params.register(&mut tape, with_grad);
        let lat = self.model.latents(&mut tape, &pv, &self.frames)?;
        let out = self.model.field_pass(&mut tape, &pv, &lat, &self.rays, FieldPath::Sparse)?;
        let rgb = tape.slice_cols(out.rgba, 0, 3)?;
        let target = tape.constant(Array::new([self.rays.len(), 3], self.targets.clone())?);
        let l = losses::total_loss(&mut tape, &self.weights, rgb, target, &lat)?;
        let value = tape.value(l.total).data()[0];
        if !with_grad {
            return Ok((value, None));
        }
        let mut vg = tape.backward(l.total)?;
        Ok((value, Some(pv.collect(&mut vg))))
    }
}

/// Checks `groups` of one configuration, appending results to `out`.
fn check(problem: &mut Problem, groups: &[&str], opts: &GradcheckOptions, out: &mut Vec<GroupResult>) -> Result<()> {
    let (_, grads) = problem.loss(true)?;
    let grads = grads.expect("gradients requested");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(17));
    let names: Vec<String> = problem.model.params.names().map(String::from).collect();
    for &group in groups {
        let (mut num, mut nfd, mut nan, mut coords, mut skipped) = (0.0f64, 0.0f64, 0.0f64, 0, 0);
        let members: Vec<&String> = names.iter().filter(|n| group_of(n) == group).collect();
        if members.is_empty() {
            return Err(CoreError::Invalid(format!("no parameters in group `{group}`")));
        }
        for name in members {
            let mut analytic = grads
                .get(name.as_str())
                .cloned()
                .unwrap_or_else(|| Array::zeros(problem.model.params.get(name).map(|a| a.shape().to_vec()).unwrap_or_default()));
            if opts.corrupt.as_deref() == Some(group) {
                analytic.data_mut().iter_mut().for_each(|g| *g *= 1.1);
            }
            let len = analytic.len();
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| analytic.data()[b].abs().total_cmp(&analytic.data()[a].abs()));
            let mut picked: Vec<usize> = order.into_iter().take(8).collect();
            for _ in 0..8 {
                picked.push(rng.random_range(0..len));
            }
            picked.sort_unstable();
            picked.dedup();
            for k in picked {
                let orig = problem.model.params.get(name)?.data()[k];
                let at = |problem: &mut Problem, x: f64| -> Result<f64> {
                    problem.model.params.get_mut(name)?.data_mut()[k] = x;
                    Ok(problem.loss(false)?.0)
                };
                let plus = at(problem, orig + opts.step)?;
                let minus = at(problem, orig - opts.step)?;
                let half_plus = at(problem, orig + 0.5 * opts.step)?;
                let half_minus = at(problem, orig - 0.5 * opts.step)?;
                problem.model.params.get_mut(name)?.data_mut()[k] = orig;
                let fd_half = (half_plus - half_minus) / opts.step;
                let fd = (plus - minus) / (2.0 * opts.step);
                // Smooth losses make the two estimates agree to O(h^2); a ReLU or
                // truncation kink inside either stencil breaks that at O(1).
                if (fd - fd_half).abs() > KINK_RATIO * fd.abs().max(fd_half.abs()).max(KINK_FLOOR) {
                    skipped += 1;
                    continue;
                }
                let an = analytic.data()[k];
                num += (fd - an).powi(2);
                nfd += fd * fd;
                nan += an * an;
                coords += 1;
            }
        }
        // A group that does not move the loss at all is a wiring failure.
        let scale = nfd.max(nan).sqrt();
        let rel_err = if scale == 0.0 { f64::INFINITY } else { num.sqrt() / scale };
        let pass = rel_err < TOLERANCE && skipped * 4 <= coords + skipped;
        out.push(GroupResult { group: group.to_string(), rel_err, coordinates: coords, skipped, pass });
    }
    Ok(())
}

/// Runs the full check: the cVAE model with learnable attention, then the
/// regressor and per-frame-code variants for their extra groups.
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut groups = Vec::new();
    let mut full = Problem::new(opts.seed, Ablation::default(), true)?;
    check(&mut full, &["fields", "density", "color", "cvae.enc", "cvae.dec", "attention"], opts, &mut groups)?;
    let mut reg = Problem::new(opts.seed, Ablation { deterministic_regressor: true, ..Ablation::default() }, false)?;
    check(&mut reg, &["regressor"], opts, &mut groups)?;
    let mut codes = Problem::new(opts.seed, Ablation { free_frame_latents: true, ..Ablation::default() }, false)?;
    check(&mut codes, &["frame_codes"], opts, &mut groups)?;
    Ok(GradcheckReport { groups, elapsed: start.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names() {
        assert_eq!(group_of("fields.l1.wx"), "fields");
        assert_eq!(group_of("cvae.enc.l2.b"), "cvae.enc");
        assert_eq!(group_of("cvae.dec.l3.w"), "cvae.dec");
        assert_eq!(group_of("frame_codes"), "frame_codes");
    }
}
