use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mixture::{log_sum_exp, HALF_LN_2PI};
use crate::model::{Likelihood, VadeModel};
use crate::objectives::PROB_CLAMP;
use crate::scalar::Scalar;

pub const DEFAULT_IMPORTANCE_SAMPLES: usize = 128;
/// `neg_log_px` is reported in nats per sample divided by this constant.
pub const NLL_NORMALIZER: f64 = 1.0;
const ROW_CHUNK: usize = 32;

/// Importance-sampled `−ln p(x)` for every row, with proposals from
/// `q(z | x)` and the mixture prior `p(z) = Σ_c π_c N(z | μ_c, σ_c²)`.
pub fn marginal_nll_per_sample<T: Scalar>(
    model: &VadeModel<T>,
    x: ArrayView2<f32>,
    importance_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if importance_samples == 0 {
        return Err(Error::InvalidArgument("importance sample count must be at least 1".into()));
    }
    let prior = model.mixture_prior()?;
    let s_count = importance_samples;
    let d = model.latent_dim();
    let dec_log_var = model.decoder_log_variance().map(|v| v.mapv(T::f64));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(x.nrows());
    for chunk in x.axis_chunks_iter(Axis(0), ROW_CHUNK) {
        let rows = chunk.nrows();
        let post = model.encode(&VadeModel::<T>::cast_batch(chunk));
        let mut z = Array2::<f64>::zeros((rows * s_count, d));
        let mut log_q = vec![0.0; rows * s_count];
        for r in 0..rows {
            for s in 0..s_count {
                let k = r * s_count + s;
                let mut lq = 0.0;
                for j in 0..d {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let lv = post.log_variance[[r, j]].f64();
                    z[[k, j]] = post.mean[[r, j]].f64() + (0.5 * lv).exp() * eps;
                    lq += -HALF_LN_2PI - 0.5 * lv - 0.5 * eps * eps;
                }
                log_q[k] = lq;
            }
        }
        let log_pz = prior.log_marginal(z.view())?;
        let decoded = model.decode(&z.mapv(T::of));
        for r in 0..rows {
            let xr = chunk.row(r);
            let weights: Vec<f64> = (0..s_count)
                .map(|s| {
                    let k = r * s_count + s;
                    let mu = decoded.row(k);
                    let log_px: f64 = match model.likelihood() {
                        Likelihood::Bernoulli => xr
                            .iter()
                            .zip(mu)
                            .map(|(&xi, &m)| {
                                let p = m.f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                                let xi = xi as f64;
                                xi * p.ln() + (1.0 - xi) * (1.0 - p).ln()
                            })
                            .sum(),
                        Likelihood::Gaussian => xr
                            .iter()
                            .zip(mu)
                            .enumerate()
                            .map(|(f, (&xi, &m))| {
                                let lv = dec_log_var.as_ref().map_or(0.0, |v| v[f]);
                                let diff = xi as f64 - m.f64();
                                -HALF_LN_2PI - 0.5 * lv - 0.5 * diff * diff * (-lv).exp()
                            })
                            .sum(),
                    };
                    log_px + log_pz[k] - log_q[k]
                })
                .collect();
            let log_mean = log_sum_exp(weights.iter().copied()) - (s_count as f64).ln();
            out.push(-log_mean);
        }
    }
    Ok(out)
}

/// Mean of [`marginal_nll_per_sample`] divided by [`NLL_NORMALIZER`].
pub fn marginal_nll<T: Scalar>(
    model: &VadeModel<T>,
    x: ArrayView2<f32>,
    importance_samples: usize,
    seed: u64,
) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let per = marginal_nll_per_sample(model, x, importance_samples, seed)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64 / NLL_NORMALIZER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::reparameterize;
    use crate::model::{Architecture, ModelSpec, SampleShape};
    use crate::objectives::reconstruction_term;

    fn model(seed: u64) -> VadeModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VadeModel::new(
            ModelSpec {
                sample_shape: SampleShape {
                    channels: 1,
                    height: 1,
                    width: 6,
                },
                latent_dim: 2,
                clusters: 3,
                likelihood: Likelihood::Bernoulli,
                architecture: Architecture::Mlp { hidden: vec![8] },
            },
            &mut rng,
        )
        .unwrap()
    }

    fn data() -> Array2<f32> {
        Array2::from_shape_fn((10, 6), |(i, j)| ((i + j) % 3 == 0) as u8 as f32)
    }

    #[test]
    fn single_sample_is_the_bound_estimate() {
        let m = model(1);
        let x = data();
        let got = marginal_nll_per_sample(&m, x.view(), 1, 5).unwrap();
        // replay the same noise stream by hand
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xr = x.mapv(|v| v as f64);
        let post = m.encode(&xr);
        let eps = Array2::from_shape_simple_fn((10, 2), || StandardNormal.sample(&mut rng));
        let z = reparameterize(&post, eps.view()).unwrap();
        let prior = m.mixture_prior().unwrap();
        let lpz = prior.log_marginal(z.view()).unwrap();
        let dec = m.decode(&z);
        for r in 0..10 {
            let lpx = reconstruction_term(xr.slice(ndarray::s![r..r + 1, ..]), dec.slice(ndarray::s![r..r + 1, ..]), Likelihood::Bernoulli, None).unwrap();
            let lq: f64 = (0..2)
                .map(|j| -HALF_LN_2PI - 0.5 * post.log_variance[[r, j]] - 0.5 * eps[[r, j]].powi(2))
                .sum();
            let bound = -(lpx + lpz[r] - lq);
            assert!((got[r] - bound).abs() < 1e-9, "{} vs {bound}", got[r]);
        }
        assert!(marginal_nll(&m, x.view(), 0, 0).is_err());
    }

    #[test]
    fn variance_shrinks_with_more_samples() {
        let m = model(2);
        let x = data();
        let spread = |s: usize| {
            let vals: Vec<f64> = (0..30).map(|seed| marginal_nll(&m, x.view(), s, seed).unwrap()).collect();
            let mean = vals.iter().sum::<f64>() / 30.0;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 29.0
        };
        assert!(spread(64) < spread(4));
    }

    #[test]
    fn estimate_tightens_as_samples_double() {
        // paired sign test over 30 repetitions
        let m = model(3);
        let x = data();
        let wins = (0..30)
            .filter(|&rep| {
                let a = marginal_nll(&m, x.view(), 4, 1000 + rep).unwrap();
                let b = marginal_nll(&m, x.view(), 8, 2000 + rep).unwrap();
                b < a
            })
            .count();
        // P(X ≥ 20 | n = 30, p = 1/2) < 0.05
        assert!(wins >= 20, "only {wins} of 30");
    }
}
