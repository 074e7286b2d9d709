use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use slrf_core::body::{BodyTemplate, Pose};
use slrf_core::dataset::{self, Dataset, Difficulty, GenerateOptions};
use slrf_core::gradcheck::{self, GradcheckOptions};
use slrf_core::model::{FieldPath, FrameInput, Model, ModelConfig};
use slrf_core::render::{self, Background, Camera, RenderOptions, RenderedImage};
use slrf_core::train::{self, CheckpointMeta, TrainConfig, Trainer};
use slrf_core::{cvae, metrics, CoreError};

use crate::{
    AblateArg, AnimateArgs, BackgroundArg, BenchArgs, Cli, CliError, Command, DifficultyArg, EvalArgs, GenDataArgs,
    GradcheckArgs, MetricArg, ModeArg, PathArg, RenderArgs, TrainArgs, ViewArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Render(a) => render(cli, a),
        Command::Animate(a) => animate(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
    }
}

/// Prints the fully resolved settings of a run as one JSON line on stderr.
fn print_resolved(cli: &Cli, command: &str, resolved: &impl Serialize) {
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    let v = serde_json::json!({ "command": command, "threads": threads, "config": resolved });
    eprintln!("resolved config: {v}");
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::Io { path: dir.into(), source: e })?;
    }
    let s = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, s + "\n").map_err(|e| CoreError::Io { path: path.into(), source: e })?;
    Ok(())
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let difficulty = match a.difficulty {
        Some(DifficultyArg::Static) => Difficulty::Static,
        Some(DifficultyArg::Rigid) => Difficulty::Rigid,
        Some(DifficultyArg::Dynamic) => Difficulty::Dynamic,
        None if a.frames == 1 => Difficulty::Static,
        None => Difficulty::Dynamic,
    };
    let opts =
        GenerateOptions { seed: a.seed, frames: a.frames, cameras: a.cameras, res: a.res, joints: a.joints, difficulty };
    print_resolved(cli, "gen-data", &serde_json::json!({ "generate": opts, "out": a.out }));
    let data = dataset::generate_dataset(&opts)?;
    dataset::write_dataset(&data, &a.out)?;
    println!("wrote {} views to {}", data.meta.cameras * data.meta.frames, a.out.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.iters {
        c.iterations = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.rays {
        c.number_of_ray_samples_per_batch = v;
    }
    if let Some(v) = a.samples {
        c.number_of_point_samples_per_ray = v;
    }
    for f in &a.ablate {
        match f {
            AblateArg::NoResiduals => c.ablation.disable_residuals = true,
            AblateArg::NoEmbeddings => c.ablation.disable_embeddings = true,
            AblateArg::Regressor => c.ablation.deterministic_regressor = true,
            AblateArg::FrameCodes => c.ablation.free_frame_latents = true,
        }
    }
    c.validate()?;
    Ok(c)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let config = resolve_train_config(a)?;
    print_resolved(cli, "train", &serde_json::json!({ "train": config, "data": a.data, "out": a.out, "resume": a.resume }));
    let data = dataset::read_dataset(&a.data)?;
    let until = config.iterations;
    let mut trainer =
        if a.resume { Trainer::resume(config, &data, &a.out)? } else { Trainer::new(config, &data, &a.out)? };
    let every = a.log_every;
    let last = trainer.run(until, |l| {
        if every > 0 && (l.iter % every == 0 || l.iter == until) {
            eprintln!(
                "iter {:>7}  loss {:.5}  psnr {:6.2}  dn_rms {:.4}  e_rms {:.4}  lr {:.2e}",
                l.iter, l.loss.total, l.psnr, l.dn_rms, l.e_rms, l.lr
            );
        }
    })?;
    println!("checkpoint {}", last.display());
    Ok(())
}

fn load(ckpt: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    Ok(train::load_checkpoint(ckpt)?)
}

fn read_data(path: &Option<PathBuf>, why: &str) -> Result<Option<Dataset>> {
    match path {
        Some(p) => Ok(Some(dataset::read_dataset(p)?)),
        None if why.is_empty() => Ok(None),
        None => Err(CliError::Usage(format!("--data is required {why}"))),
    }
}

/// Camera from a dataset index or a JSON file.
fn resolve_camera(arg: &str, data: Option<&Dataset>) -> Result<(Camera, String)> {
    if let Ok(k) = arg.parse::<usize>() {
        let data = data.ok_or_else(|| CliError::Usage("--data is required for a camera index".into()))?;
        let cam = data
            .cameras
            .get(k)
            .ok_or_else(|| CliError::Usage(format!("camera {k} not in dataset ({} cameras)", data.cameras.len())))?;
        return Ok((cam.clone(), format!("cam{k}")));
    }
    let cam: Camera = dataset::read_json(Path::new(arg))?;
    cam.validate()?;
    let stem = Path::new(arg).file_stem().map_or("camera".into(), |s| s.to_string_lossy().into_owned());
    Ok((cam, stem))
}

/// Novel mode latent from `--z`.
fn resolve_z(arg: &Option<String>, nodes: usize) -> Result<Option<Vec<f64>>> {
    let Some(arg) = arg else { return Ok(None) };
    if arg == "zeros" {
        return Ok(None);
    }
    let v: Vec<f64> = dataset::read_json(Path::new(arg))?;
    if v.len() == cvae::LATENT_DIM {
        Ok(Some((0..nodes).flat_map(|_| v.iter().copied()).collect()))
    } else if v.len() == nodes * cvae::LATENT_DIM {
        Ok(Some(v))
    } else {
        Err(CliError::Usage(format!(
            "--z needs {} or {} values, found {}",
            cvae::LATENT_DIM,
            nodes * cvae::LATENT_DIM,
            v.len()
        )))
    }
}

fn render_options(v: &ViewArgs, meta: &CheckpointMeta) -> RenderOptions {
    RenderOptions {
        path: FieldPath::Sparse,
        background: match v.background {
            BackgroundArg::White => Background::White,
            BackgroundArg::Black => Background::Black,
        },
        samples: v.samples.unwrap_or(meta.train.number_of_point_samples_per_ray),
        chunk: None,
    }
}

fn save_image(img: &RenderedImage, path: &Path, alpha: bool) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::Io { path: dir.into(), source: e })?;
    }
    img.write_png(path, alpha)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn render(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let v = &a.view;
    match v.mode {
        ModeArg::Novel if a.frame.is_some() => {
            return Err(CliError::Usage(
                "--frame selects a training frame for the encoder and cannot be used in novel mode; pass --pose".into(),
            ))
        }
        ModeArg::Replay if v.z.is_some() => {
            return Err(CliError::Usage("--z only applies to novel mode; replay uses the encoder mean".into()))
        }
        ModeArg::Replay if a.pose.is_some() => {
            return Err(CliError::Usage("--pose only applies to novel mode; replay uses the dataset pose".into()))
        }
        _ => {}
    }
    print_resolved(cli, "render", a);
    let (model, meta) = load(&v.ckpt)?;
    let data = read_data(&v.data, if v.mode == ModeArg::Replay { "in replay mode" } else { "" })?;
    let (camera, cam_name) = resolve_camera(&v.camera, data.as_ref())?;
    let (input, name) = match v.mode {
        ModeArg::Replay => {
            let data = data.as_ref().expect("checked above");
            let f = a.frame.unwrap_or(0);
            let pose = data
                .poses
                .get(f)
                .ok_or_else(|| CliError::Usage(format!("frame {f} not in dataset ({} frames)", data.poses.len())))?;
            (FrameInput::replay(pose.clone()), format!("replay_{cam_name}_frame{f:04}.png"))
        }
        ModeArg::Novel => {
            let pose = match &a.pose {
                Some(p) => dataset::read_json(p)?,
                None => Pose::rest(meta.template.joint_count()),
            };
            let z = resolve_z(&v.z, model.num_nodes())?;
            (FrameInput::novel(pose, z), format!("novel_{cam_name}.png"))
        }
    };
    let img = render::render_image(&model, &input, &camera, &render_options(v, &meta))?;
    save_image(&img, &v.out.join(name), v.alpha)
}

fn animate(cli: &Cli, a: &AnimateArgs) -> Result<()> {
    let v = &a.view;
    if v.mode == ModeArg::Replay && (v.z.is_some() || a.poses.is_some()) {
        return Err(CliError::Usage("--z and --poses only apply to novel mode".into()));
    }
    print_resolved(cli, "animate", a);
    let (model, meta) = load(&v.ckpt)?;
    let need = if v.mode == ModeArg::Replay || a.poses.is_none() { "for dataset poses" } else { "" };
    let data = read_data(&v.data, need)?;
    let (camera, _) = resolve_camera(&v.camera, data.as_ref())?;
    let poses: Vec<Pose> = match &a.poses {
        Some(p) => dataset::read_json(p)?,
        None => data.as_ref().expect("checked above").poses.clone(),
    };
    let z = resolve_z(&v.z, model.num_nodes())?;
    let opts = render_options(v, &meta);
    for (k, pose) in poses.into_iter().enumerate() {
        let input = match v.mode {
            ModeArg::Replay => FrameInput::replay(pose),
            ModeArg::Novel => FrameInput::novel(pose, z.clone()),
        };
        let img = render::render_image(&model, &input, &camera, &opts)?;
        save_image(&img, &v.out.join(format!("frame_{k:04}.png")), v.alpha)?;
    }
    Ok(())
}

/// Parses `0-3,7` into indices below `limit`.
fn parse_list(s: &str, limit: usize, what: &str) -> Result<Vec<usize>> {
    let bad = || CliError::Usage(format!("bad {what} list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((l, h)) => (l.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?),
            None => {
                let x: usize = part.trim().parse().map_err(|_| bad())?;
                (x, x)
            }
        };
        if lo > hi || hi >= limit {
            return Err(CliError::Usage(format!("{what} range `{part}` outside 0..{limit}")));
        }
        out.extend(lo..=hi);
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn resolve_split(split: &str, data: &Dataset) -> Result<Vec<(usize, usize)>> {
    let all = train::all_views(data);
    if split == "train" || split == "all" {
        return Ok(all);
    }
    if let Some(list) = split.strip_prefix("cameras:") {
        let cams = parse_list(list, data.meta.cameras, "camera")?;
        return Ok(all.into_iter().filter(|(c, _)| cams.contains(c)).collect());
    }
    if let Some(list) = split.strip_prefix("frames:") {
        let frames = parse_list(list, data.meta.frames, "frame")?;
        return Ok(all.into_iter().filter(|(_, f)| frames.contains(f)).collect());
    }
    Err(CliError::Usage(format!("unknown split `{split}`; use train, cameras:LIST or frames:LIST")))
}

#[derive(Serialize)]
struct EvalReportRow {
    camera: usize,
    frame: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ssim: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    split: String,
    rows: Vec<EvalReportRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_ssim: Option<f64>,
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    print_resolved(cli, "eval", a);
    let (model, meta) = load(&a.ckpt)?;
    let data = dataset::read_dataset(&a.data)?;
    let views = resolve_split(&a.split, &data)?;
    let samples = a.samples.unwrap_or(meta.train.number_of_point_samples_per_ray);
    let want_psnr = a.metrics.contains(&MetricArg::Psnr);
    let want_ssim = a.metrics.contains(&MetricArg::Ssim);
    let rows = train::evaluate(&model, &data, &views, samples, want_ssim)?;
    let n = rows.len().max(1) as f64;
    let report = EvalReport {
        checkpoint: a.ckpt.clone(),
        split: a.split.clone(),
        mean_psnr: want_psnr.then(|| train::mean_psnr(&rows)),
        mean_ssim: want_ssim.then(|| rows.iter().map(|r| r.ssim).sum::<f64>() / n),
        rows: rows
            .iter()
            .map(|r| EvalReportRow {
                camera: r.camera,
                frame: r.frame,
                psnr: want_psnr.then(|| metrics::psnr_for_log(r.psnr)),
                ssim: want_ssim.then_some(r.ssim),
            })
            .collect(),
    };
    let cell = |x: Option<f64>, digits: usize| x.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"));
    println!("{:>6} {:>6} {:>8} {:>7}", "camera", "frame", "psnr", "ssim");
    for r in &report.rows {
        println!("{:>6} {:>6} {:>8} {:>7}", r.camera, r.frame, cell(r.psnr, 2), cell(r.ssim, 4));
    }
    println!("{:>13} {:>8} {:>7}", "mean", cell(report.mean_psnr, 2), cell(report.mean_ssim, 4));
    if let Some(out) = &a.out {
        write_json(&out.join("metrics.json"), &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PathTiming {
    path: FieldPath,
    runs_ms: Vec<f64>,
    min_ms: f64,
    mean_ms: f64,
    /// Packed block rows over dense rows.
    memory_ratio: f64,
    /// Kept (sample, node) pairs over all pairs.
    pair_ratio: f64,
}

#[derive(Serialize)]
struct BenchReport {
    checkpoint: Option<PathBuf>,
    nodes: usize,
    res: u32,
    samples: usize,
    timings: Vec<PathTiming>,
    #[serde(skip_serializing_if = "Option::is_none")]
    speedup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_abs_diff: Option<f64>,
}

fn time_path(
    model: &Model<f32>,
    input: &FrameInput,
    camera: &Camera,
    path: FieldPath,
    a: &BenchArgs,
) -> Result<(PathTiming, RenderedImage)> {
    let opts = RenderOptions { path, background: Background::Black, samples: a.samples, chunk: None };
    let mut runs = Vec::new();
    let mut last = None;
    for _ in 0..a.repeat.max(1) {
        let start = Instant::now();
        let img = render::render_image(model, input, camera, &opts)?;
        runs.push(start.elapsed().as_secs_f64() * 1e3);
        last = Some(img);
    }
    let img = last.expect("at least one run");
    let t = PathTiming {
        path,
        min_ms: runs.iter().copied().fold(f64::INFINITY, f64::min),
        mean_ms: runs.iter().sum::<f64>() / runs.len() as f64,
        runs_ms: runs,
        memory_ratio: img.stats.memory_ratio,
        pair_ratio: img.stats.pair_ratio,
    };
    Ok((t, img))
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    print_resolved(cli, "bench", a);
    let model = match &a.ckpt {
        Some(p) => load(p)?.0,
        None => Model::new(ModelConfig { init_seed: a.seed, ..ModelConfig::default() }, BodyTemplate::humanoid(6)?)?,
    };
    let camera = dataset::ring_cameras(1, a.res).remove(0);
    let input = FrameInput::replay(Pose::rest(model.template.joint_count()));
    let paths: &[FieldPath] = match a.path {
        PathArg::Dense => &[FieldPath::Dense],
        PathArg::Sparse => &[FieldPath::Sparse],
        PathArg::Both => &[FieldPath::Dense, FieldPath::Sparse],
    };
    let mut timings = Vec::new();
    let mut images = Vec::new();
    for &p in paths {
        let (t, img) = time_path(&model, &input, &camera, p, a)?;
        eprintln!("{:?}: min {:.1} ms, memory ratio {:.4}", p, t.min_ms, t.memory_ratio);
        timings.push(t);
        images.push(img);
    }
    let (speedup, max_abs_diff) = if images.len() == 2 {
        let diff = images[0].rgb.iter().zip(&images[1].rgb).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
        (Some(timings[0].min_ms / timings[1].min_ms), Some(diff))
    } else {
        (None, None)
    };
    let report = BenchReport {
        checkpoint: a.ckpt.clone(),
        nodes: model.num_nodes(),
        res: a.res,
        samples: a.samples,
        timings,
        speedup,
        max_abs_diff,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if let Some(out) = &a.out {
        write_json(&out.join("bench.json"), &report)?;
    }
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    print_resolved(cli, "gradcheck", a);
    let opts = GradcheckOptions { seed: a.seed, step: a.step, corrupt: a.corrupt.clone() };
    let report = gradcheck::run(&opts)?;
    println!("{:<12} {:>10} {:>7} {:>7}  result", "group", "rel_err", "coords", "skipped");
    for g in &report.groups {
        println!(
            "{:<12} {:>10.3e} {:>7} {:>7}  {}",
            g.group,
            g.rel_err,
            g.coordinates,
            g.skipped,
            if g.pass { "pass" } else { "FAIL" }
        );
    }
    println!("elapsed {:.2} s", report.elapsed.as_secs_f64());
    if let Some(out) = &a.out {
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    if report.pass() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.groups.iter().filter(|g| !g.pass).map(|g| g.group.as_str()).collect();
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}
