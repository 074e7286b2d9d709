//! Finite-difference checks for every differentiable primitive.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slrf_tensor::{Array, Segments, Tape, TensorError, Var};

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], avoid: &[f64]) -> Array<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = rng.random_range(-2.0..2.0);
            if avoid.iter().all(|k| (x - k).abs() > 1e-2) {
                break x;
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Reduces an op output to a scalar with fixed random weights so every
/// output component contributes to the checked gradient.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_array(&mut rng, &shape, &[]);
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

fn eval(inputs: &[Array<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let loss = weighted_sum(&mut tape, out, 99);
    tape.value(loss).item().unwrap()
}

/// Norm-wise relative error between analytic and central-difference gradients.
fn check(inputs: Vec<Array<f64>>, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let loss = weighted_sum(&mut tape, out, 99);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|g| g.to_f64_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            numeric[i] = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(if scale < 1e-12 { diff } else { diff / scale });
    }
    worst
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

macro_rules! grad_test {
    ($name:ident, [$($shape:expr),*], avoid = $avoid:expr, $build:expr) => {
        #[test]
        fn $name() {
            let mut r = rng();
            let inputs = vec![$(random_array(&mut r, &$shape, &$avoid)),*];
            let err = check(inputs, &$build);
            assert!(err < 1e-5, "relative error {err:e}");
        }
    };
}

grad_test!(add_grad, [[3, 4], [3, 4]], avoid = [], |t, v| t.add(v[0], v[1]).unwrap());
grad_test!(sub_grad, [[3, 4], [3, 4]], avoid = [], |t, v| t.sub(v[0], v[1]).unwrap());
grad_test!(mul_grad, [[3, 4], [3, 4]], avoid = [], |t, v| t.mul(v[0], v[1]).unwrap());
grad_test!(scale_grad, [[5]], avoid = [], |t, v| {
    let s = t.scale(v[0], -1.7).unwrap();
    t.add_scalar(s, 0.3).unwrap()
});
grad_test!(exp_grad, [[6]], avoid = [], |t, v| t.exp(v[0]).unwrap());
grad_test!(sin_grad, [[6]], avoid = [], |t, v| t.sin(v[0]).unwrap());
grad_test!(cos_grad, [[6]], avoid = [], |t, v| t.cos(v[0]).unwrap());
grad_test!(tanh_grad, [[6]], avoid = [], |t, v| t.tanh(v[0]).unwrap());
grad_test!(sigmoid_grad, [[6]], avoid = [], |t, v| t.sigmoid(v[0]).unwrap());
grad_test!(softplus_grad, [[6]], avoid = [], |t, v| t.softplus(v[0]).unwrap());
grad_test!(relu_grad, [[8]], avoid = [0.0], |t, v| t.relu(v[0]).unwrap());
grad_test!(max_scalar_grad, [[8]], avoid = [0.5], |t, v| t.max_scalar(v[0], 0.5).unwrap());
grad_test!(clamp_grad, [[8]], avoid = [-1.0, 1.0], |t, v| t.clamp(v[0], -1.0, 1.0).unwrap());
grad_test!(square_grad, [[6]], avoid = [], |t, v| t.square(v[0]).unwrap());
grad_test!(sum_rows_grad, [[3, 5]], avoid = [], |t, v| t.sum_rows(v[0]).unwrap());
grad_test!(mean_grad, [[3, 5]], avoid = [], |t, v| t.mean(v[0]).unwrap());
grad_test!(matmul_grad, [[3, 4], [4, 2]], avoid = [], |t, v| t.matmul(v[0], v[1]).unwrap());
grad_test!(linear_grad, [[5, 3], [3, 4], [4]], avoid = [], |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap());
grad_test!(grouped_linear_grad, [[7, 3], [2, 3, 4], [2, 4]], avoid = [], |t, v| {
    let segs = Arc::new(Segments::new(vec![(0, 3), (4, 3)]));
    t.grouped_linear(v[0], v[1], Some(v[2]), segs).unwrap()
});
grad_test!(gather_grad, [[4, 3]], avoid = [], |t, v| t.gather_rows(v[0], Arc::new(vec![2, 0, 2, 3])).unwrap());
grad_test!(scatter_grad, [[4, 3]], avoid = [], |t, v| t.scatter_add_rows(v[0], Arc::new(vec![1, 0, 1, 4]), 5).unwrap());
grad_test!(concat_grad, [[3, 2], [3, 4]], avoid = [], |t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap());
grad_test!(slice_grad, [[3, 6]], avoid = [], |t, v| t.slice_cols(v[0], 2, 3).unwrap());
grad_test!(mul_rows_grad, [[4, 3], [4]], avoid = [], |t, v| t.mul_rows(v[0], v[1]).unwrap());
grad_test!(div_rows_grad, [[4, 3], [4]], avoid = [0.0], |t, v| t.div_rows(v[0], v[1]).unwrap());
grad_test!(reshape_grad, [[4, 3]], avoid = [], |t, v| {
    let r = t.reshape(v[0], &[2, 6]).unwrap();
    t.sin(r).unwrap()
});
grad_test!(transpose_grad, [[3, 5]], avoid = [], |t, v| {
    let x = t.transpose(v[0]).unwrap();
    t.sin(x).unwrap()
});
grad_test!(fourier_grad, [[3, 2]], avoid = [], |t, v| t.fourier(v[0], 3).unwrap());
grad_test!(affine_rows_grad, [[2, 3]], avoid = [], |t, v| {
    let mats: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.2).collect();
    t.affine_rows(v[0], Arc::new(mats)).unwrap()
});
grad_test!(row_sq_dist_grad, [[4, 3], [4, 3]], avoid = [], |t, v| t.row_sq_dist(v[0], v[1]).unwrap());
grad_test!(trunc_gauss_grad, [[6]], avoid = [], |t, v| {
    // Squared distances in (0, 4); sigma chosen so the cutoff sits well outside.
    let d2 = t.square(v[0]).unwrap();
    t.trunc_gauss(d2, 1.5, 1e-3).unwrap()
});
grad_test!(composite_grad, [[3, 5, 3], [3, 5]], avoid = [], |t, v| {
    let dens = t.softplus(v[1]).unwrap();
    let deltas = Arc::new((0..15).map(|i| 0.1 + 0.05 * (i % 4) as f64).collect());
    t.composite(v[0], dens, deltas, [0.2, 0.5, 1.0]).unwrap()
});

#[test]
fn matmul_identity_padded() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Array::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
    let b = t.constant(Array::new([3, 1], vec![4.0, 5.0, 6.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 1]);
    assert_eq!(t.value(c).data(), &[4.0, 5.0]);
}

#[test]
fn relu_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Array::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = t.relu(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn gather_then_scatter_restores_rows() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Array::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let idx = Arc::new(vec![2, 0]);
    let g = t.gather_rows(x, idx.clone()).unwrap();
    assert_eq!(t.value(g).data(), &[5.0, 6.0, 1.0, 2.0]);
    let s = t.scatter_add_rows(g, idx, 3).unwrap();
    assert_eq!(t.value(s).data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
}

#[test]
fn square_gradient_at_three() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Array::scalar(3.0), true);
    let y = t.square(x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn truncation_boundary_takes_flat_side() {
    let (sigma, eps) = (0.05f64, 1e-3f64);
    // exp(-d2 / 2 sigma^2) == eps exactly at the cutoff.
    let k = 1.0 / (2.0 * sigma * sigma);
    let mut d2_cut = 2.0 * sigma * sigma * (1.0 / eps).ln();
    // Step to the first representable distance where the weight reaches zero.
    while slrf_tensor::trunc_gauss(d2_cut, k, eps) > 0.0 {
        d2_cut = f64::from_bits(d2_cut.to_bits() + 1);
    }
    let mut t = Tape::new();
    let x = t.leaf(Array::new([1], vec![d2_cut]).unwrap(), true);
    let w = t.trunc_gauss(x, sigma, eps).unwrap();
    assert!(t.value(w).data()[0] == 0.0);
    let loss = t.sum(w).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data()[0], 0.0);
    // One-sided difference on the clamped side agrees.
    let h = 1e-7;
    let right = slrf_tensor::trunc_gauss(d2_cut + h, k, eps);
    assert_eq!((right - 0.0) / h, 0.0);
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Array::new([2], vec![1.0, 2.0]).unwrap(), true);
    let y = t.square(x).unwrap();
    assert!(matches!(t.backward(y), Err(TensorError::NotScalar(_))));
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(TensorError::TapeConsumed)));
}

#[test]
fn backward_on_empty_tape_errors() {
    let mut t = Tape::<f64>::new();
    assert!(matches!(t.backward(slrf_tensor_var_zero()), Err(TensorError::EmptyTape)));
}

fn slrf_tensor_var_zero() -> Var {
    // Any handle works; the tape has no records.
    let mut scratch = Tape::<f64>::new();
    scratch.constant(Array::scalar(0.0))
}

#[test]
fn non_finite_output_is_an_error() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Array::new([1], vec![1000.0]).unwrap());
    assert!(matches!(t.exp(x), Err(TensorError::NonFinite { op: "exp" })));
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Array::zeros([2, 3]));
    let b = t.constant(Array::zeros([2, 2]));
    assert!(matches!(t.add(a, b), Err(TensorError::Shape { .. })));
    assert!(matches!(t.matmul(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn no_grad_tape_records_nothing() {
    let mut t = Tape::<f32>::no_grad();
    let x = t.leaf(Array::scalar(2.0), true);
    let y = t.square(x).unwrap();
    assert!(!t.requires_grad(y));
    let g = t.backward(y).unwrap();
    assert!(g.get(x).is_none());
}

#[test]
fn fourier_layout_matches_manual_values() {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let enc = slrf_tensor::fourier_encode(&[half_pi], 2);
    let want = [half_pi, 1.0, 0.0, 0.0, -1.0];
    for (a, b) in enc.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(slrf_tensor::fourier_encode(&[0.0f64], 1), vec![0.0, 0.0, 1.0]);
}

fn loss_parts(inputs: &[f64]) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    // Two losses sharing one leaf: l1 = sum(sin x), l2 = sum(x^2 * 0.5).
    let build = |which: u8| {
        let mut t = Tape::new();
        let x = t.leaf(Array::new([inputs.len()], inputs.to_vec()).unwrap(), true);
        let s = t.sin(x).unwrap();
        let l1 = t.sum(s).unwrap();
        let q = t.square(x).unwrap();
        let q = t.scale(q, 0.5).unwrap();
        let l2 = t.sum(q).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => t.add(l1, l2).unwrap(),
        };
        let v = t.value(loss).item().unwrap();
        (v, t.backward(loss).unwrap().get(x).unwrap().to_f64_vec())
    };
    let (v, g_sum) = build(2);
    (v, build(0).1, build(1).1, g_sum)
}

proptest! {
    #[test]
    fn backward_is_linear_in_the_loss(xs in prop::collection::vec(-2.0f64..2.0, 1..8)) {
        let (_, g1, g2, g12) = loss_parts(&xs);
        for i in 0..xs.len() {
            prop_assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        vals in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 0..40),
        name in "[a-z.]{1,12}",
    ) {
        let a = Array::new([vals.len()], vals.clone()).unwrap();
        let recs = vec![(name.clone(), a), ("tail".to_string(), Array::scalar(1.5f32))];
        let bytes = slrf_tensor::checkpoint::to_bytes(&recs);
        let back = slrf_tensor::checkpoint::read_records(&bytes[..]).unwrap();
        prop_assert_eq!(&back[0].1.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        &vals.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(slrf_tensor::checkpoint::to_bytes(&back), bytes);
    }
}
