//! Articulated capsule template, forward kinematics, linear blend skinning,
//! node sampling and the pose-attention condition.

use nalgebra::{Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Tolerance for "sums to one" checks on skinning and attention weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joints {
    /// Rest positions in canonical space (meters).
    pub positions: Vec<[f64; 3]>,
    /// Parent of each joint; `None` only for joint 0. Parents precede children.
    pub parents: Vec<Option<usize>>,
}

impl Joints {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.positions.len();
        if j < 2 {
            return Err(CoreError::Invalid(format!("template needs at least 2 joints, got {j}")));
        }
        if self.parents.len() != j {
            return Err(CoreError::CountMismatch { what: "joint parents".into(), expected: j, found: self.parents.len() });
        }
        if self.parents[0].is_some() {
            return Err(CoreError::Invalid("joint 0 must be the root".into()));
        }
        for (k, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                _ => return Err(CoreError::Invalid(format!("joint {k} has invalid parent {p:?}"))),
            }
        }
        if self.positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(CoreError::Invalid("non-finite joint position".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyTemplate {
    pub joints: Joints,
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub skin_weights: Vec<Vec<f64>>,
}

impl BodyTemplate {
    /// Default procedural humanoid with `joints` joints (2..=6).
    pub fn humanoid(joints: usize) -> Result<Self> {
        Ok(Humanoid::new(joints)?.template())
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.joints.validate()?;
        let j = self.joint_count();
        if self.skin_weights.len() != self.vertices.len() {
            return Err(CoreError::CountMismatch {
                what: "skin weight rows".into(),
                expected: self.vertices.len(),
                found: self.skin_weights.len(),
            });
        }
        for (v, w) in self.skin_weights.iter().enumerate() {
            if w.len() != j {
                return Err(CoreError::CountMismatch { what: format!("skin weights of vertex {v}"), expected: j, found: w.len() });
            }
            check_weights(w).map_err(|e| CoreError::Invalid(format!("vertex {v}: {e}")))?;
        }
        let nv = self.vertices.len() as u32;
        if self.faces.iter().flatten().any(|&i| i >= nv) {
            return Err(CoreError::Invalid("face index out of range".into()));
        }
        Ok(())
    }
}

fn check_weights(w: &[f64]) -> std::result::Result<(), String> {
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err("weights must be finite and nonnegative".into());
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(format!("weights sum to {s}"));
    }
    Ok(())
}

/// Capsule rigidly attached to one joint, in canonical coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub joint: usize,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl Capsule {
    /// Distance from `p` to the capsule axis segment.
    pub fn axis_distance(&self, p: [f64; 3]) -> f64 {
        let (a, b, p) = (v3(self.a), v3(self.b), v3(p));
        let ab = b - a;
        let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        (p - (a + ab * t)).norm()
    }

    /// Signed distance, negative inside.
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        self.axis_distance(p) - self.radius
    }
}

struct Part {
    rest: [f64; 3],
    parent: Option<usize>,
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

// Y-up, feet at y = 0, about 1.73 m tall, arms hanging in a slight A-pose.
const PARTS: [Part; 6] = [
    Part { rest: [0.0, 0.95, 0.0], parent: None, a: [0.0, 0.98, 0.0], b: [0.0, 1.38, 0.0], radius: 0.14 },
    Part { rest: [0.10, 0.92, 0.0], parent: Some(0), a: [0.10, 0.86, 0.0], b: [0.10, 0.09, 0.0], radius: 0.075 },
    Part { rest: [-0.10, 0.92, 0.0], parent: Some(0), a: [-0.10, 0.86, 0.0], b: [-0.10, 0.09, 0.0], radius: 0.075 },
    Part { rest: [0.20, 1.40, 0.0], parent: Some(0), a: [0.22, 1.36, 0.0], b: [0.30, 0.86, 0.0], radius: 0.05 },
    Part { rest: [-0.20, 1.40, 0.0], parent: Some(0), a: [-0.22, 1.36, 0.0], b: [-0.30, 0.86, 0.0], radius: 0.05 },
    Part { rest: [0.0, 1.48, 0.0], parent: Some(0), a: [0.0, 1.56, 0.0], b: [0.0, 1.62, 0.0], radius: 0.11 },
];

/// Procedural capsule figure: joint tree plus one capsule per joint.
///
/// Joint order is torso (root), left leg, right leg, left arm, right arm,
/// head; smaller figures keep a prefix of that list.
#[derive(Clone, Debug, PartialEq)]
pub struct Humanoid {
    pub joints: Joints,
    pub capsules: Vec<Capsule>,
}

impl Humanoid {
    pub fn new(joint_count: usize) -> Result<Self> {
        if !(2..=PARTS.len()).contains(&joint_count) {
            return Err(CoreError::Config(format!("joint count must be in 2..=6, got {joint_count}")));
        }
        let parts = &PARTS[..joint_count];
        let joints = Joints {
            positions: parts.iter().map(|p| p.rest).collect(),
            parents: parts.iter().map(|p| p.parent).collect(),
        };
        let capsules = parts
            .iter()
            .enumerate()
            .map(|(k, p)| Capsule { joint: k, a: p.a, b: p.b, radius: p.radius })
            .collect();
        Ok(Self { joints, capsules })
    }

    /// Union signed distance in canonical space.
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        self.capsules.iter().map(|c| c.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Meshes every capsule surface, drops vertices buried inside another
    /// capsule, and assigns soft nearest-bone skinning weights.
    pub fn template(&self) -> BodyTemplate {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (ci, cap) in self.capsules.iter().enumerate() {
            let (verts, tris) = capsule_mesh(cap);
            let mut remap = vec![u32::MAX; verts.len()];
            for (k, v) in verts.iter().enumerate() {
                let buried = self.capsules.iter().enumerate().any(|(cj, other)| cj != ci && other.sdf(*v) < -1e-4);
                if !buried {
                    remap[k] = vertices.len() as u32;
                    vertices.push(*v);
                }
            }
            for t in tris {
                let m = [remap[t[0] as usize], remap[t[1] as usize], remap[t[2] as usize]];
                if m.iter().all(|&i| i != u32::MAX) {
                    faces.push(m);
                }
            }
        }
        let skin_weights = vertices.iter().map(|&v| self.skin_weights(v)).collect();
        BodyTemplate { joints: self.joints.clone(), vertices, faces, skin_weights }
    }

    fn skin_weights(&self, p: [f64; 3]) -> Vec<f64> {
        const FALLOFF: f64 = 0.02;
        let d: Vec<f64> = self.capsules.iter().map(|c| c.sdf(p)).collect();
        let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = d.iter().map(|x| (-(x - dmin) / FALLOFF).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }
}

fn capsule_mesh(c: &Capsule) -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
    const AROUND: usize = 16;
    const CAP_RINGS: usize = 4;
    let (a, b) = (v3(c.a), v3(c.b));
    let axis = (b - a).normalize();
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = axis.cross(&helper).normalize();
    let e2 = axis.cross(&e1);
    let len = (b - a).norm();
    let cyl = ((len / 0.06).ceil() as usize).max(1);

    // Rings as (center, radius), bottom pole to top pole.
    let mut rings: Vec<(Vector3<f64>, f64)> = Vec::new();
    for k in 1..=CAP_RINGS {
        let phi = std::f64::consts::FRAC_PI_2 * k as f64 / CAP_RINGS as f64;
        rings.push((a - axis * (c.radius * phi.cos()), c.radius * phi.sin()));
    }
    for i in 1..cyl {
        rings.push((a + axis * (len * i as f64 / cyl as f64), c.radius));
    }
    for k in (1..=CAP_RINGS).rev() {
        let phi = std::f64::consts::FRAC_PI_2 * k as f64 / CAP_RINGS as f64;
        rings.push((b + axis * (c.radius * phi.cos()), c.radius * phi.sin()));
    }

    let mut verts = vec![arr(a - axis * c.radius)];
    for (center, r) in &rings {
        for j in 0..AROUND {
            let ang = std::f64::consts::TAU * j as f64 / AROUND as f64;
            verts.push(arr(center + (e1 * ang.cos() + e2 * ang.sin()) * *r));
        }
    }
    let top = verts.len() as u32;
    verts.push(arr(b + axis * c.radius));

    let ring = |i: usize, j: usize| (1 + i * AROUND + j % AROUND) as u32;
    let mut tris = Vec::new();
    for j in 0..AROUND {
        tris.push([0, ring(0, j + 1), ring(0, j)]);
    }
    for i in 0..rings.len() - 1 {
        for j in 0..AROUND {
            tris.push([ring(i, j), ring(i, j + 1), ring(i + 1, j + 1)]);
            tris.push([ring(i, j), ring(i + 1, j + 1), ring(i + 1, j)]);
        }
    }
    let last = rings.len() - 1;
    for j in 0..AROUND {
        tris.push([top, ring(last, j), ring(last, j + 1)]);
    }
    (verts, tris)
}

/// Per-frame skeleton pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub frame: usize,
    /// Axis-angle per joint, joint-major, radians.
    pub theta: Vec<f64>,
    /// Root translation in meters.
    pub root: [f64; 3],
    /// Frame index divided by the sequence length, in [0, 1].
    pub time_norm: f64,
}

impl Pose {
    pub fn rest(joints: usize) -> Self {
        Self { frame: 0, theta: vec![0.0; 3 * joints], root: [0.0; 3], time_norm: 0.0 }
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.theta.len() != 3 * joints {
            return Err(CoreError::CountMismatch { what: "pose theta".into(), expected: 3 * joints, found: self.theta.len() });
        }
        if self.theta.iter().chain(&self.root).any(|x| !x.is_finite()) {
            return Err(CoreError::Invalid(format!("non-finite pose for frame {}", self.frame)));
        }
        if !(0.0..=1.0).contains(&self.time_norm) {
            return Err(CoreError::Invalid(format!("time_norm {} outside [0, 1]", self.time_norm)));
        }
        Ok(())
    }
}

fn v3(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn arr(v: Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn rigid(r: Rotation3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

/// Global joint frames `G_j` (rest pose gives pure translations to the rest
/// positions).
pub fn global_transforms(joints: &Joints, pose: &Pose) -> Result<Vec<Matrix4<f64>>> {
    let j = joints.len();
    if pose.theta.len() != 3 * j {
        return Err(CoreError::CountMismatch { what: "pose theta".into(), expected: 3 * j, found: pose.theta.len() });
    }
    if pose.theta.iter().chain(&pose.root).any(|x| !x.is_finite()) {
        return Err(CoreError::Invalid(format!("non-finite pose for frame {}", pose.frame)));
    }
    let mut g: Vec<Matrix4<f64>> = Vec::with_capacity(j);
    for k in 0..j {
        let rot = Rotation3::from_scaled_axis(Vector3::new(pose.theta[3 * k], pose.theta[3 * k + 1], pose.theta[3 * k + 2]));
        let rest = v3(joints.positions[k]);
        let m = match joints.parents[k] {
            None => rigid(rot, rest + v3(pose.root)),
            Some(p) => g[p] * rigid(rot, rest - v3(joints.positions[p])),
        };
        g.push(m);
    }
    Ok(g)
}

/// Skinning transforms `M_j = G_j [I | -rest_j]`, mapping canonical points to
/// posed space.
pub fn joint_transforms(joints: &Joints, pose: &Pose) -> Result<Vec<Matrix4<f64>>> {
    let g = global_transforms(joints, pose)?;
    Ok(g.iter()
        .zip(&joints.positions)
        .map(|(g, rest)| g * Matrix4::new_translation(&-v3(*rest)))
        .collect())
}

/// Posed joint positions.
pub fn posed_joints(joints: &Joints, pose: &Pose) -> Result<Vec<[f64; 3]>> {
    Ok(global_transforms(joints, pose)?.iter().map(|g| [g[(0, 3)], g[(1, 3)], g[(2, 3)]]).collect())
}

/// Linear blend `T = sum_j w_j M_j` of 4x4 matrices, without projection
/// back onto rigid motions.
pub fn node_transform(weights: &[f64], transforms: &[Matrix4<f64>]) -> Result<Matrix4<f64>> {
    if weights.len() != transforms.len() {
        return Err(CoreError::CountMismatch { what: "skin weights".into(), expected: transforms.len(), found: weights.len() });
    }
    check_weights(weights).map_err(CoreError::Invalid)?;
    Ok(weights.iter().zip(transforms).fold(Matrix4::zeros(), |acc, (w, m)| acc + m * *w))
}

pub fn transform_point(t: &Matrix4<f64>, p: [f64; 3]) -> [f64; 3] {
    let h = t * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
    [h.x, h.y, h.z]
}

/// Posed node position `T (n + dn)`.
pub fn skin_node(t: &Matrix4<f64>, canonical: [f64; 3], dn: [f64; 3]) -> [f64; 3] {
    transform_point(t, [canonical[0] + dn[0], canonical[1] + dn[1], canonical[2] + dn[2]])
}

/// Canonical node positions with their skinning vectors and kernel settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSet {
    pub positions: Vec<[f64; 3]>,
    pub skin: Vec<Vec<f64>>,
    /// Template vertex each node was taken from.
    pub source: Vec<usize>,
    pub sigma: f64,
    pub eps: f64,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Greedy farthest point sampling seeded at index 0. Ties go to the lowest
/// index.
pub fn farthest_point_sampling(points: &[[f64; 3]], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > points.len() {
        return Err(CoreError::Config(format!("cannot sample {n} nodes from {} vertices", points.len())));
    }
    let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let mut chosen = vec![0usize];
    let mut min_d: Vec<f64> = points.iter().map(|&p| dist(p, points[0])).collect();
    while chosen.len() < n {
        let mut best = 0;
        for (k, &d) in min_d.iter().enumerate() {
            if d > min_d[best] {
                best = k;
            }
        }
        chosen.push(best);
        for (k, p) in points.iter().enumerate() {
            min_d[k] = min_d[k].min(dist(*p, points[best]));
        }
    }
    Ok(chosen)
}

pub fn sample_nodes(template: &BodyTemplate, n: usize, sigma: f64, eps: f64) -> Result<NodeSet> {
    if !(sigma > 0.0) || !(eps > 0.0 && eps < 1.0) {
        return Err(CoreError::Config(format!("kernel needs sigma > 0 and 0 < eps < 1, got {sigma}, {eps}")));
    }
    let source = farthest_point_sampling(&template.vertices, n)?;
    Ok(NodeSet {
        positions: source.iter().map(|&i| template.vertices[i]).collect(),
        skin: source.iter().map(|&i| template.skin_weights[i].clone()).collect(),
        source,
        sigma,
        eps,
    })
}

/// Row-stochastic `J x J` map turning skinning weights into per-joint
/// attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub w: Vec<Vec<f64>>,
}

impl AttentionMap {
    /// `I + A` over the kinematic tree's one-hop adjacency, row-normalized.
    pub fn from_tree(joints: &Joints) -> Self {
        let j = joints.len();
        let mut w = vec![vec![0.0; j]; j];
        for (k, row) in w.iter_mut().enumerate() {
            row[k] = 1.0;
        }
        for (k, p) in joints.parents.iter().enumerate() {
            if let Some(p) = *p {
                w[k][p] = 1.0;
                w[p][k] = 1.0;
            }
        }
        for row in &mut w {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        Self { w }
    }

    pub fn identity(j: usize) -> Self {
        Self { w: (0..j).map(|r| (0..j).map(|c| if r == c { 1.0 } else { 0.0 }).collect()).collect() }
    }

    pub fn uniform(j: usize) -> Self {
        Self { w: vec![vec![1.0 / j as f64; j]; j] }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.w.len();
        for (r, row) in self.w.iter().enumerate() {
            if row.len() != j {
                return Err(CoreError::CountMismatch { what: format!("attention row {r}"), expected: j, found: row.len() });
            }
            check_weights(row).map_err(|e| CoreError::Invalid(format!("attention row {r}: {e}")))?;
        }
        Ok(())
    }

    /// Per-joint attention `W w` for one node's skinning vector.
    pub fn attend(&self, skin: &[f64]) -> Vec<f64> {
        self.w.iter().map(|row| row.iter().zip(skin).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Node-specific pose condition: each joint's axis-angle scaled by its
/// attention weight, root orientation zeroed.
pub fn pose_condition(theta: &[f64], skin: &[f64], attention: &AttentionMap) -> Vec<f64> {
    let a = attention.attend(skin);
    theta
        .iter()
        .enumerate()
        .map(|(k, &x)| if k < 3 { 0.0 } else { a[k / 3] * x })
        .collect()
}
