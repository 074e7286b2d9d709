//! Layer plumbing shared by the field, head and latent networks.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use slrf_tensor::{Array, ParamStore, ParamVars, Real, Segments, Tape, Var};

use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Act {
    Relu,
    None,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Array<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect();
    Array::new(shape, data).expect("shape matches data")
}

/// He-uniform weights scaled by `gain`, zero bias. `groups` stacks one layer
/// per node.
pub(crate) fn init_layer(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    groups: Option<usize>,
    fan_in: usize,
    out: usize,
    gain: f64,
) {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    let (wshape, bshape) = match groups {
        Some(g) => (vec![g, fan_in, out], vec![g, out]),
        None => (vec![fan_in, out], vec![out]),
    };
    store.insert(format!("{prefix}.w"), uniform(rng, wshape, bound));
    store.insert(format!("{prefix}.b"), Array::zeros(bshape));
}

fn activate<T: Real>(tape: &mut Tape<T>, x: Var, act: Act) -> Result<Var> {
    Ok(match act {
        Act::Relu => tape.relu(x)?,
        Act::None => x,
    })
}

pub(crate) fn dense<T: Real>(tape: &mut Tape<T>, pv: &ParamVars, prefix: &str, x: Var, act: Act) -> Result<Var> {
    let y = tape.linear(x, pv.get(&format!("{prefix}.w"))?, Some(pv.get(&format!("{prefix}.b"))?))?;
    activate(tape, y, act)
}

pub(crate) fn grouped<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    segments: &Arc<Segments>,
    act: Act,
) -> Result<Var> {
    let y = tape.grouped_linear(
        x,
        pv.get(&format!("{prefix}.w"))?,
        Some(pv.get(&format!("{prefix}.b"))?),
        segments.clone(),
    )?;
    activate(tape, y, act)
}
