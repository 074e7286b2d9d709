//! Training objective.

use serde::{Deserialize, Serialize};
use slrf_tensor::{Array, Real, Tape, Var};

use crate::model::LatentVars;
use crate::Result;

/// Loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub trans: f64,
    pub ebd: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 1.0, trans: 0.02, ebd: 0.1, kl: 1e-5 }
    }
}

/// Loss vars on the tape; absent terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub trans: Option<Var>,
    pub ebd: Option<Var>,
    pub kl: Option<Var>,
}

/// Scalar loss values for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub rec: f64,
    pub trans: f64,
    pub ebd: f64,
    pub kl: f64,
}

impl LossVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0].as_f64());
        LossValues {
            total: get(Some(self.total)),
            rec: get(Some(self.rec)),
            trans: get(self.trans),
            ebd: get(self.ebd),
            kl: get(self.kl),
        }
    }
}

/// Mean over rays of the squared RGB error. `pred` and `target` are `[R, 3]`.
pub fn reconstruction<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let rays = tape.shape(pred)[0].max(1);
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, T::lit(1.0 / rays as f64))?)
}

/// Sum of squares, divided by `frames`.
fn sum_sq_per_frame<T: Real>(tape: &mut Tape<T>, x: Var, frames: usize) -> Result<Var> {
    let sq = tape.square(x)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, T::lit(1.0 / frames.max(1) as f64))?)
}

/// `1/2 sum(mu^2 + sigma^2 - 2 ln sigma - 1)` with `lv = 2 ln sigma`, divided by `frames`.
pub fn kl_divergence<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var, frames: usize) -> Result<Var> {
    let m2 = tape.square(mu)?;
    let s2 = tape.exp(logvar)?;
    let a = tape.add(m2, s2)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -T::one())?;
    let s = tape.sum(c)?;
    Ok(tape.scale(s, T::lit(0.5 / frames.max(1) as f64))?)
}

/// Weighted regularizers present in `lat`; `total` is `None` when there are
/// none.
#[derive(Clone, Copy, Debug)]
pub struct RegVars {
    pub total: Option<Var>,
    pub trans: Option<Var>,
    pub ebd: Option<Var>,
    pub kl: Option<Var>,
}

impl RegVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0].as_f64());
        LossValues { total: get(self.total), rec: 0.0, trans: get(self.trans), ebd: get(self.ebd), kl: get(self.kl) }
    }
}

pub fn regularizers<T: Real>(tape: &mut Tape<T>, weights: &LossWeights, lat: &LatentVars) -> Result<RegVars> {
    let trans = lat.dn.map(|dn| sum_sq_per_frame(tape, dn, lat.frames)).transpose()?;
    let ebd = lat.e.map(|e| sum_sq_per_frame(tape, e, lat.frames)).transpose()?;
    let kl = match (lat.mu, lat.logvar) {
        (Some(m), Some(lv)) => Some(kl_divergence(tape, m, lv, lat.frames)?),
        _ => None,
    };
    let mut total: Option<Var> = None;
    for (term, w) in [(trans, weights.trans), (ebd, weights.ebd), (kl, weights.kl)] {
        if let Some(t) = term {
            let s = tape.scale(t, T::lit(w))?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    Ok(RegVars { total, trans, ebd, kl })
}

/// Weighted total over the reconstruction and the terms present in `lat`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    weights: &LossWeights,
    rgb_pred: Var,
    rgb_target: Var,
    lat: &LatentVars,
) -> Result<LossVars> {
    let rec = reconstruction(tape, rgb_pred, rgb_target)?;
    let reg = regularizers(tape, weights, lat)?;
    let mut total = tape.scale(rec, T::lit(weights.rec))?;
    if let Some(r) = reg.total {
        total = tape.add(total, r)?;
    }
    Ok(LossVars { total, rec, trans: reg.trans, ebd: reg.ebd, kl: reg.kl })
}

/// Scalar KL of one node's posterior against the unit normal.
pub fn kl_scalar(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu.iter().zip(sigma).map(|(&m, &s)| m * m + s * s - 2.0 * s.ln() - 1.0).sum::<f64>()
}

/// Convenience: KL of plain arrays through the tape op.
pub fn kl_from_arrays<T: Real>(mu: Array<T>, logvar: Array<T>) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let m = tape.constant(mu);
    let lv = tape.constant(logvar);
    let k = kl_divergence(&mut tape, m, lv, 1)?;
    Ok(tape.value(k).data()[0].as_f64())
}
