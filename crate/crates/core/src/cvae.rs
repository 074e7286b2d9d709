//! Per-node conditional VAE producing residual node translations and detail
//! embeddings.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use slrf_tensor::{Array, ParamStore, ParamVars, Real, Segments, Tape, Var};

use crate::fields::{encoded_len, fourier_encode, EMBED_DIM, M_TIME};
use crate::nn::{self, Act};
use crate::{CoreError, Result};

pub const LATENT_DIM: usize = 8;
pub const HIDDEN: usize = 64;
pub const DECODER_OUT: usize = 3 + EMBED_DIM;
pub const TIME_ENC: usize = encoded_len(1, M_TIME);
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

pub(crate) fn init_encoder(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, nodes: usize, cond: usize) {
    nn::init_layer(store, rng, "cvae.enc.l1", Some(nodes), TIME_ENC + cond, HIDDEN, 1.0);
    nn::init_layer(store, rng, "cvae.enc.l2", Some(nodes), HIDDEN, HIDDEN, 1.0);
    nn::init_layer(store, rng, "cvae.enc.l3", Some(nodes), HIDDEN, 2 * LATENT_DIM, 0.1);
}

pub(crate) fn init_decoder(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, prefix: &str, nodes: usize, input: usize) {
    nn::init_layer(store, rng, &format!("{prefix}.l1"), Some(nodes), input, HIDDEN, 1.0);
    nn::init_layer(store, rng, &format!("{prefix}.l2"), Some(nodes), HIDDEN, HIDDEN, 1.0);
    nn::init_layer(store, rng, &format!("{prefix}.l3"), Some(nodes), HIDDEN, DECODER_OUT, 0.1);
}

/// Encoder over node-major rows `concat(gamma(t), theta_i)`. Returns the mean
/// and the clamped log-variance.
pub fn encoder<T: Real>(tape: &mut Tape<T>, pv: &ParamVars, input: Var, segments: &Arc<Segments>) -> Result<(Var, Var)> {
    let h = nn::grouped(tape, pv, "cvae.enc.l1", input, segments, Act::Relu)?;
    let h = nn::grouped(tape, pv, "cvae.enc.l2", h, segments, Act::Relu)?;
    let out = nn::grouped(tape, pv, "cvae.enc.l3", h, segments, Act::None)?;
    let mu = tape.slice_cols(out, 0, LATENT_DIM)?;
    let lv = tape.slice_cols(out, LATENT_DIM, LATENT_DIM)?;
    let lv = tape.clamp(lv, T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX))?;
    Ok((mu, lv))
}

/// `z = mu + exp(lv / 2) * noise`.
pub fn reparameterize<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    let half = tape.scale(logvar, T::lit(0.5))?;
    let sigma = tape.exp(half)?;
    let s = tape.mul(sigma, noise)?;
    Ok(tape.add(mu, s)?)
}

/// Decoder (or deterministic regressor, by `prefix`) producing `(dn, e)`.
/// `bound` scales a tanh on the translation; `None` leaves it raw.
pub fn decoder<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    prefix: &str,
    input: Var,
    segments: &Arc<Segments>,
    bound: Option<f64>,
) -> Result<(Var, Var)> {
    let h = nn::grouped(tape, pv, &format!("{prefix}.l1"), input, segments, Act::Relu)?;
    let h = nn::grouped(tape, pv, &format!("{prefix}.l2"), h, segments, Act::Relu)?;
    let out = nn::grouped(tape, pv, &format!("{prefix}.l3"), h, segments, Act::None)?;
    let raw = tape.slice_cols(out, 0, 3)?;
    let dn = match bound {
        Some(b) => {
            let t = tape.tanh(raw)?;
            tape.scale(t, T::lit(b))?
        }
        None => raw,
    };
    let e = tape.slice_cols(out, 3, EMBED_DIM)?;
    Ok((dn, e))
}

fn single_row(params: &ParamStore<impl Real>, prefix: &str, node: usize) -> Result<Arc<Segments>> {
    let nodes = params.get(&format!("{prefix}.l1.b"))?.rows();
    if node >= nodes {
        return Err(CoreError::Invalid(format!("node {node} out of range for {nodes} nodes")));
    }
    Ok(Arc::new(Segments::new((0..nodes).map(|g| (0, usize::from(g == node))).collect())))
}

/// Mean and standard deviation of node `node`'s posterior.
pub fn encode<T: Real>(params: &ParamStore<T>, node: usize, time_norm: f64, theta_i: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&time_norm) {
        return Err(CoreError::Invalid(format!("time_norm {time_norm} outside [0, 1]")));
    }
    let segs = single_row(params, "cvae.enc", node)?;
    let mut input = fourier_encode(&[T::lit(time_norm)], M_TIME);
    input.extend_from_slice(theta_i);
    let mut tape = Tape::no_grad();
    let pv = params.register(&mut tape, false);
    let x = tape.constant(Array::new([1, input.len()], input)?);
    let (mu, lv) = encoder(&mut tape, &pv, x, &segs)?;
    let sigma = tape.value(lv).data().iter().map(|&l| (l * T::lit(0.5)).exp()).collect();
    Ok((tape.value(mu).data().to_vec(), sigma))
}

/// Reparameterized sample `mu + sigma * noise`.
pub fn sample_latent<T: Real>(mu: &[T], sigma: &[T], noise: &[T]) -> Vec<T> {
    mu.iter().zip(sigma).zip(noise).map(|((&m, &s), &n)| m + s * n).collect()
}

/// Residual translation and embedding for one node.
pub fn decode<T: Real>(
    params: &ParamStore<T>,
    node: usize,
    z: &[T],
    theta_i: &[T],
    bound: Option<f64>,
) -> Result<([T; 3], Vec<T>)> {
    let segs = single_row(params, "cvae.dec", node)?;
    let input: Vec<T> = z.iter().chain(theta_i).copied().collect();
    let mut tape = Tape::no_grad();
    let pv = params.register(&mut tape, false);
    let x = tape.constant(Array::new([1, input.len()], input)?);
    let (dn, e) = decoder(&mut tape, &pv, "cvae.dec", x, &segs, bound)?;
    let d = tape.value(dn).data();
    Ok(([d[0], d[1], d[2]], tape.value(e).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const COND: usize = 12;

    fn params(zero: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_encoder(&mut s, &mut rng, 3, COND);
        init_decoder(&mut s, &mut rng, "cvae.dec", 3, LATENT_DIM + COND);
        let mut s = s.cast::<f64>();
        if zero {
            let names: Vec<String> = s.names().map(String::from).collect();
            for n in names {
                s.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        s
    }

    #[test]
    fn zero_encoder_gives_unit_sigma() {
        let p = params(true);
        let (mu, sigma) = encode(&p, 1, 0.5, &[0.3; COND]).unwrap();
        assert_eq!(mu, vec![0.0; LATENT_DIM]);
        assert_eq!(sigma, vec![1.0; LATENT_DIM]);
        assert!(encode(&p, 1, 1.5, &[0.0; COND]).is_err());
    }

    #[test]
    fn logvar_is_clamped() {
        let mut p = params(true);
        p.get_mut("cvae.enc.l3.b").unwrap().data_mut()[LATENT_DIM] = 10.0;
        let (_, sigma) = encode(&p, 0, 0.0, &[0.0; COND]).unwrap();
        assert!((sigma[0] - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_latent(&[1.0, -1.0], &[2.0, 3.0], &[0.0, 0.0]), vec![1.0, -1.0]);
        assert_eq!(sample_latent(&[1.0], &[0.0], &[123.0]), vec![1.0]);
        assert_eq!(sample_latent(&[1.0; 8], &[2.0; 8], &[0.5; 8]), vec![2.0; 8]);
    }

    #[test]
    fn zero_decoder_outputs_zero() {
        let p = params(true);
        let (dn, e) = decode(&p, 2, &[0.7; LATENT_DIM], &[0.1; COND], Some(0.25)).unwrap();
        assert_eq!(dn, [0.0; 3]);
        assert_eq!(e.len(), EMBED_DIM);
        assert!(e.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tanh_bound_holds() {
        let mut p = params(false);
        p.get_mut("cvae.dec.l3.b").unwrap().data_mut()[..3].copy_from_slice(&[50.0, -50.0, 3.0]);
        let (dn, e) = decode(&p, 0, &[5.0; LATENT_DIM], &[2.0; COND], Some(0.1)).unwrap();
        assert_eq!(3 + e.len(), DECODER_OUT);
        assert!(dn.iter().all(|x| x.abs() <= 0.1));
    }
}
