//! Node-local radiance fields: encoding, local coordinates, truncated
//! Gaussian blending, batched per-node MLPs, feature fusion and the shared
//! color/density heads.

use std::sync::Arc;

use nalgebra::Matrix4;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slrf_tensor::{Array, ParamStore, ParamVars, Real, Segments, Tape, Var};

use crate::body::transform_point;
use crate::nn::{self, Act};
use crate::{CoreError, Result};

pub const M_COORD: usize = 6;
pub const M_VIEW: usize = 4;
pub const M_TIME: usize = 12;
pub const FIELD_WIDTH: usize = 64;
pub const FEATURE_WIDTH: usize = 64;
pub const EMBED_DIM: usize = 32;
pub const HEAD_WIDTH: usize = 64;

pub use slrf_tensor::fourier_encode;

/// Width of `fourier_encode` applied to a `d`-vector with `m` octaves.
pub const fn encoded_len(d: usize, m: usize) -> usize {
    d * (1 + 2 * m)
}

/// Distance at which the truncated Gaussian reaches zero.
pub fn cutoff_radius(sigma: f64, eps: f64) -> f64 {
    sigma * (2.0 * (1.0 / eps).ln()).sqrt()
}

/// `max(exp(-|p - n|^2 / 2 sigma^2) - eps, 0)`.
pub fn blend_weight<T: Real>(p: [T; 3], node: [T; 3], sigma: T, eps: T) -> T {
    let k = T::one() / (T::lit(2.0) * sigma * sigma);
    slrf_tensor::trunc_gauss(slrf_tensor::row_sq_dist(&p, &node), k, eps)
}

/// `T^-1 p - (n + dn)`. Fails when the blended transform is singular.
pub fn local_coord(p: [f64; 3], t: &Matrix4<f64>, canonical: [f64; 3], dn: [f64; 3]) -> Result<[f64; 3]> {
    let inv = t.try_inverse().ok_or_else(|| CoreError::Numerical("singular node transform".into()))?;
    let q = transform_point(&inv, p);
    Ok([q[0] - canonical[0] - dn[0], q[1] - canonical[1] - dn[1], q[2] - canonical[2] - dn[2]])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityActivation {
    #[default]
    Softplus,
    Relu,
}

pub(crate) fn init_params(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, nodes: usize) {
    let enc = encoded_len(3, M_COORD);
    let mut l1 = ParamStore::new();
    nn::init_layer(&mut l1, rng, "x", Some(nodes), enc + EMBED_DIM, FIELD_WIDTH, 1.0);
    // Split the first layer into its coordinate and embedding rows.
    let w = l1.get("x.w").expect("just inserted");
    let (mut wx, mut we) = (Vec::new(), Vec::new());
    for g in 0..nodes {
        let block = &w.data()[g * (enc + EMBED_DIM) * FIELD_WIDTH..(g + 1) * (enc + EMBED_DIM) * FIELD_WIDTH];
        wx.extend_from_slice(&block[..enc * FIELD_WIDTH]);
        we.extend_from_slice(&block[enc * FIELD_WIDTH..]);
    }
    store.insert("fields.l1.wx", Array::new([nodes, enc, FIELD_WIDTH], wx).expect("sized"));
    store.insert("fields.l1.we", Array::new([nodes, EMBED_DIM, FIELD_WIDTH], we).expect("sized"));
    store.insert("fields.l1.b", Array::zeros([nodes, FIELD_WIDTH]));
    nn::init_layer(store, rng, "fields.l2", Some(nodes), FIELD_WIDTH, FIELD_WIDTH, 1.0);
    nn::init_layer(store, rng, "fields.l3", Some(nodes), FIELD_WIDTH, FEATURE_WIDTH, 1.0);

    nn::init_layer(store, rng, "density.l1", None, FEATURE_WIDTH, HEAD_WIDTH, 1.0);
    nn::init_layer(store, rng, "density.l2", None, HEAD_WIDTH, 1, 0.1);
    nn::init_layer(store, rng, "color.l1", None, FEATURE_WIDTH + encoded_len(3, M_VIEW), HEAD_WIDTH, 1.0);
    nn::init_layer(store, rng, "color.l2", None, HEAD_WIDTH, HEAD_WIDTH, 1.0);
    nn::init_layer(store, rng, "color.l3", None, HEAD_WIDTH, 3, 0.1);
}

/// Index structure for a set of (sample, node) pairs.
///
/// Pairs are ordered node-major; `node_segments` delimits each node's pairs,
/// `pair_latent` maps a pair to its (node, frame) latent row and
/// `pair_target` to the compacted sample row it contributes to.
#[derive(Clone, Debug)]
pub struct PairLayout {
    pub node_segments: Arc<Segments>,
    pub latent_segments: Arc<Segments>,
    pub pair_latent: Arc<Vec<usize>>,
    pub pair_target: Arc<Vec<usize>>,
    pub targets: usize,
}

/// Per-pair feature vectors `F_i(gamma(p_i); e_i)`, three ReLU layers.
///
/// `embeddings` holds one row per latent row (node-major); `None` means the
/// embeddings are disabled and only the per-node bias remains.
pub fn local_features<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    local: Var,
    embeddings: Option<Var>,
    layout: &PairLayout,
) -> Result<Var> {
    let enc = tape.fourier(local, M_COORD)?;
    let wx = pv.get("fields.l1.wx")?;
    let b = pv.get("fields.l1.b")?;
    let h = match embeddings {
        Some(e) => {
            let x = tape.grouped_linear(enc, wx, None, layout.node_segments.clone())?;
            let bias = tape.grouped_linear(e, pv.get("fields.l1.we")?, Some(b), layout.latent_segments.clone())?;
            let bias = tape.gather_rows(bias, layout.pair_latent.clone())?;
            tape.add(x, bias)?
        }
        None => tape.grouped_linear(enc, wx, Some(b), layout.node_segments.clone())?,
    };
    let h = tape.relu(h)?;
    let h = nn::grouped(tape, pv, "fields.l2", h, &layout.node_segments, Act::Relu)?;
    nn::grouped(tape, pv, "fields.l3", h, &layout.node_segments, Act::Relu)
}

/// Weighted average of pair features into their target rows. Returns the
/// fused features `[targets, F]`.
pub fn fuse<T: Real>(tape: &mut Tape<T>, features: Var, weights: Var, layout: &PairLayout) -> Result<Var> {
    let num = tape.mul_rows(features, weights)?;
    let num = tape.scatter_add_rows(num, layout.pair_target.clone(), layout.targets)?;
    let den = tape.scatter_add_rows(weights, layout.pair_target.clone(), layout.targets)?;
    Ok(tape.div_rows(num, den)?)
}

/// Shared heads: `(rgb [Q, 3], density [Q, 1])` from fused features and
/// encoded view directions `[Q, 27]`.
pub fn heads<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    fused: Var,
    view_enc: Var,
    activation: DensityActivation,
) -> Result<(Var, Var)> {
    let h = nn::dense(tape, pv, "density.l1", fused, Act::Relu)?;
    let d = nn::dense(tape, pv, "density.l2", h, Act::None)?;
    let density = match activation {
        DensityActivation::Softplus => tape.softplus(d)?,
        DensityActivation::Relu => tape.relu(d)?,
    };
    let x = tape.concat_cols(&[fused, view_enc])?;
    let h = nn::dense(tape, pv, "color.l1", x, Act::Relu)?;
    let h = nn::dense(tape, pv, "color.l2", h, Act::Relu)?;
    let c = nn::dense(tape, pv, "color.l3", h, Act::None)?;
    Ok((tape.sigmoid(c)?, density))
}

/// One active node for a single query point.
#[derive(Clone, Debug)]
pub struct ActiveNode<'a, T> {
    pub node: usize,
    pub local: [T; 3],
    pub weight: T,
    pub embedding: Option<&'a [T]>,
}

/// Fused feature at one point from its active nodes; `None` when the list is
/// empty (the point lies outside every node's support).
pub fn eval_and_fuse<T: Real>(params: &ParamStore<T>, active: &[ActiveNode<'_, T>]) -> Result<Option<Vec<T>>> {
    if active.is_empty() {
        return Ok(None);
    }
    let nodes = params.get("fields.l1.b")?.rows();
    let mut order: Vec<usize> = (0..active.len()).collect();
    order.sort_by_key(|&k| active[k].node);
    let mut counts = vec![0usize; nodes];
    for a in active {
        if a.node >= nodes {
            return Err(CoreError::Invalid(format!("node {} out of range for {nodes} nodes", a.node)));
        }
        counts[a.node] += 1;
    }
    let k = active.len();
    let segments = Arc::new(Segments::from_counts(&counts));
    let layout = PairLayout {
        node_segments: segments.clone(),
        latent_segments: segments,
        pair_latent: Arc::new((0..k).collect()),
        pair_target: Arc::new(vec![0; k]),
        targets: 1,
    };
    let mut tape = Tape::no_grad();
    let pv = params.register(&mut tape, false);
    let local: Vec<T> = order.iter().flat_map(|&i| active[i].local).collect();
    let local = tape.constant(Array::new([k, 3], local)?);
    let embeddings = if active.iter().all(|a| a.embedding.is_none()) {
        None
    } else {
        let mut e = Vec::with_capacity(k * EMBED_DIM);
        for &i in &order {
            match active[i].embedding {
                Some(v) if v.len() == EMBED_DIM => e.extend_from_slice(v),
                Some(v) => return Err(CoreError::CountMismatch { what: "embedding".into(), expected: EMBED_DIM, found: v.len() }),
                None => e.extend(std::iter::repeat_n(T::zero(), EMBED_DIM)),
            }
        }
        Some(tape.constant(Array::new([k, EMBED_DIM], e)?))
    };
    let weights = tape.constant(Array::new([k], order.iter().map(|&i| active[i].weight).collect())?);
    let feats = local_features(&mut tape, &pv, local, embeddings, &layout)?;
    let fused = fuse(&mut tape, feats, weights, &layout)?;
    Ok(Some(tape.value(fused).data().to_vec()))
}

/// Color and density for one fused feature seen along unit direction `view`.
pub fn color_density<T: Real>(
    params: &ParamStore<T>,
    fused: &[T],
    view: [T; 3],
    activation: DensityActivation,
) -> Result<([T; 3], T)> {
    let mut tape = Tape::no_grad();
    let pv = params.register(&mut tape, false);
    let f = tape.constant(Array::new([1, fused.len()], fused.to_vec())?);
    let v = tape.constant(Array::new([1, encoded_len(3, M_VIEW)], fourier_encode(&view, M_VIEW))?);
    let (rgb, density) = heads(&mut tape, &pv, f, v, activation)?;
    let c = tape.value(rgb).data();
    Ok(([c[0], c[1], c[2]], tape.value(density).data()[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_params(&mut s, &mut ChaCha8Rng::seed_from_u64(3), 4);
        s.cast()
    }

    #[test]
    fn encoding_examples() {
        assert_eq!(fourier_encode(&[0.0f64], 1), vec![0.0, 0.0, 1.0]);
        assert_eq!(fourier_encode(&[0.1f64, 0.2, 0.3], M_COORD).len(), 39);
        assert_eq!(encoded_len(3, M_VIEW), 27);
        assert_eq!(encoded_len(1, M_TIME), 25);
    }

    #[test]
    fn blend_weight_examples() {
        let n = [0.3, 1.2, -0.1];
        assert_eq!(blend_weight(n, n, 0.05, 0.001), 0.999);
        let r = cutoff_radius(0.05, 0.001);
        assert!((r - 0.18585).abs() < 1e-5);
        assert_eq!(blend_weight([0.3 + r * 1.000001, 1.2, -0.1], n, 0.05, 0.001), 0.0);
        assert_eq!(blend_weight([1e6, 0.0, 0.0], n, 0.05, 0.001), 0.0);
    }

    #[test]
    fn local_coord_examples() {
        let n = [0.3, 1.2, -0.1];
        let i = Matrix4::identity();
        assert_eq!(local_coord(n, &i, n, [0.0; 3]).unwrap(), [0.0; 3]);
        let q = local_coord(n, &i, n, [0.1, 0.0, 0.0]).unwrap();
        assert!((q[0] + 0.1).abs() < 1e-15 && q[1] == 0.0 && q[2] == 0.0);
        let d = nalgebra::Vector3::new(0.5, -0.25, 2.0);
        let t = Matrix4::new_translation(&d);
        let p = [1.0, 2.0, 3.0];
        let q = local_coord(p, &t, n, [0.01, 0.02, 0.03]).unwrap();
        let want = [1.0 - 0.5 - 0.3 - 0.01, 2.0 + 0.25 - 1.2 - 0.02, 3.0 - 2.0 + 0.1 - 0.03];
        for k in 0..3 {
            assert!((q[k] - want[k]).abs() < 1e-12);
        }
        assert!(local_coord(p, &Matrix4::zeros(), n, [0.0; 3]).is_err());
    }

    #[test]
    fn single_active_node_ignores_weight() {
        let p = params();
        let e: Vec<f64> = (0..EMBED_DIM).map(|k| (k as f64 * 0.37).sin()).collect();
        let one = |w: f64| {
            eval_and_fuse(&p, &[ActiveNode { node: 2, local: [0.05, -0.02, 0.01], weight: w, embedding: Some(&e) }])
                .unwrap()
                .unwrap()
        };
        let (a, b) = (one(0.9), one(0.003));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(eval_and_fuse::<f64>(&p, &[]).unwrap().is_none());
    }

    #[test]
    fn density_is_view_independent_and_rgb_bounded() {
        let p = params();
        let f: Vec<f64> = (0..FEATURE_WIDTH).map(|k| (k as f64 * 0.11).cos()).collect();
        let (c1, d1) = color_density(&p, &f, [0.0, 0.0, 1.0], DensityActivation::Softplus).unwrap();
        let (c2, d2) = color_density(&p, &f, [0.6, 0.0, 0.8], DensityActivation::Softplus).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 >= 0.0);
        assert!(c1.iter().chain(&c2).all(|&c| c > 0.0 && c < 1.0));
    }
}
