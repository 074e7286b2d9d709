use std::time::Instant;

use slrf_core::body::{Humanoid, Pose};
use slrf_core::fields::DensityActivation;
use slrf_core::model::{FieldPath, FrameInput, Model, ModelConfig};
use slrf_core::render::{render_image, Background, Camera, RenderOptions};

fn model(n: usize, density: DensityActivation) -> Model<f32> {
    let template = Humanoid::new(6).unwrap().template();
    let config = ModelConfig { num_nodes: n, density_activation: density, ..ModelConfig::default() };
    Model::new(config, template).unwrap()
}

fn camera(res: u32) -> Camera {
    let f = 144.0 * res as f64 / 96.0;
    Camera::look_at([0.0, 0.9, 3.0], [0.0, 0.9, 0.0], [0.0, 1.0, 0.0], res, res, f, 2.2, 3.8)
}

fn pose() -> Pose {
    let mut p = Pose::rest(6);
    p.theta[5] = 0.3;
    p.theta[10] = -0.4;
    p.time_norm = 0.25;
    p
}

#[test]
fn zero_parameters_render_background() {
    let mut m = model(32, DensityActivation::Relu);
    let names: Vec<String> = m.params.names().map(String::from).collect();
    for n in names {
        m.params.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let opts = RenderOptions { background: Background::White, samples: 16, ..RenderOptions::default() };
    let img = render_image(&m, &FrameInput::replay(pose()), &camera(24), &opts).unwrap();
    assert!(img.rgb.iter().all(|&x| x == 1.0));
    assert!(img.alpha.iter().all(|&a| a == 0.0));
}

#[test]
fn replay_is_bit_identical_and_novel_skips_encoder() {
    let m = model(64, DensityActivation::Softplus);
    let opts = RenderOptions { samples: 16, ..RenderOptions::default() };
    let a = render_image(&m, &FrameInput::replay(pose()), &camera(32), &opts).unwrap();
    let b = render_image(&m, &FrameInput::replay(pose()), &camera(32), &opts).unwrap();
    assert_eq!(a.rgb, b.rgb);
    let calls = m.encoder_calls();
    let z0 = render_image(&m, &FrameInput::novel(pose(), None), &camera(32), &opts).unwrap();
    assert_eq!(m.encoder_calls(), calls);
    let z = vec![1.5; 64 * 8];
    let z1 = render_image(&m, &FrameInput::novel(pose(), Some(z)), &camera(32), &opts).unwrap();
    assert_ne!(z0.rgb, z1.rgb);
}

#[test]
fn sparse_matches_dense() {
    let m = model(128, DensityActivation::Softplus).cast::<f64>();
    let opts = RenderOptions { samples: 24, ..RenderOptions::default() };
    let t = Instant::now();
    let s = render_image(&m, &FrameInput::replay(pose()), &camera(48), &opts).unwrap();
    let ts = t.elapsed();
    let t = Instant::now();
    let d = render_image(&m, &FrameInput::replay(pose()), &camera(48), &RenderOptions { path: FieldPath::Dense, ..opts }).unwrap();
    let td = t.elapsed();
    eprintln!("sparse {ts:?} dense {td:?} stats {:?}", s.stats);
    let max = s.rgb.iter().zip(&d.rgb).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(max < 1e-5, "max diff {max}");
    assert!(s.alpha.iter().any(|&a| a > 0.01));
}
