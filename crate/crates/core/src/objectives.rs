//! Loss terms of the clustering ELBO and their composition into the
//! weighted training objective, with the full backward pass.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mixture::{
    inverse_min_max_traced, log_density_kernel, reparameterize, responsibilities_from_log_weights,
    LatentPosterior, Responsibilities,
};
use crate::model::{sigmoid, Likelihood, PriorParams, VadeModel};
use crate::scalar::Scalar;

/// Bernoulli means are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// All values are batch means in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl_categorical: f64,
    pub kl_gaussian: f64,
    pub regularizer_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(reconstruction: f64, kl_categorical: f64, kl_gaussian: f64, weight: f64) -> Self {
        Self {
            reconstruction,
            kl_categorical,
            kl_gaussian,
            regularizer_weight: weight,
            total: -reconstruction + weight * (kl_categorical + kl_gaussian),
        }
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::of(PROB_CLAMP);
    p.max(lo).min(T::one() - lo)
}

/// Single-sample estimate of `E_q[ln p(x | z)]`, averaged over the batch.
///
/// `decoded` holds `μ_x`. For Gaussian observations `decoder_log_var` gives
/// the per-feature log-variance (unit variance when absent).
pub fn reconstruction_term<T: Scalar>(
    x: ArrayView2<T>,
    decoded: ArrayView2<T>,
    likelihood: Likelihood,
    decoder_log_var: Option<ArrayView1<T>>,
) -> Result<T> {
    if x.dim() != decoded.dim() {
        return Err(shape_err(format!("x {:?} vs decoded {:?}", x.dim(), decoded.dim())));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = T::of(x.nrows() as f64);
    match likelihood {
        Likelihood::Bernoulli => {
            if let Some(v) = x.iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
                return Err(Error::InvalidArgument(format!(
                    "Bernoulli targets must lie in [0, 1], found {v}"
                )));
            }
            let mut total = T::zero();
            ndarray::Zip::from(&x).and(&decoded).for_each(|&xi, &p| {
                let p = clamp_prob(p);
                total += xi * p.ln() + (T::one() - xi) * (T::one() - p).ln();
            });
            Ok(total / n)
        }
        Likelihood::Gaussian => {
            let d = x.ncols();
            let log_var = match decoder_log_var {
                Some(v) if v.len() != d => {
                    return Err(shape_err(format!("{} decoder log-variances for {d} features", v.len())))
                }
                Some(v) => v.to_owned(),
                None => Array1::zeros(d),
            };
            let half = T::of(0.5);
            let c = T::of(crate::mixture::HALF_LN_2PI);
            let mut total = T::zero();
            for (xr, mr) in x.outer_iter().zip(decoded.outer_iter()) {
                for k in 0..d {
                    let diff = xr[k] - mr[k];
                    total += -c - half * log_var[k] - half * diff * diff * (-log_var[k]).exp();
                }
            }
            Ok(total / n)
        }
    }
}

/// Batch mean of `Σ_c q_c ln(q_c / π_c)`, with `0 ln 0 = 0`.
pub fn kl_categorical<T: Scalar>(q: &Responsibilities<T>, weights: ArrayView1<T>) -> Result<T> {
    if q.values.ncols() != weights.len() {
        return Err(shape_err(format!(
            "responsibilities have {} columns, {} weights",
            q.values.ncols(),
            weights.len()
        )));
    }
    let mut total = T::zero();
    for row in q.values.outer_iter() {
        for (&qc, &pc) in row.iter().zip(weights) {
            if qc > T::zero() {
                total += qc * (qc / pc).ln();
            }
        }
    }
    Ok(total / T::of(q.values.nrows().max(1) as f64))
}

/// Per-sample, per-cluster closed-form KL between the diagonal posterior and
/// each component, shape `L × C`.
fn component_kl<T: Scalar>(post: &LatentPosterior<T>, prior: &PriorParams<T>) -> Array2<T> {
    let (l_count, d) = post.mean.dim();
    let c_count = prior.clusters();
    let half = T::of(0.5);
    let mut out = Array2::zeros((l_count, c_count));
    for l in 0..l_count {
        for c in 0..c_count {
            let mut k = T::zero();
            for j in 0..d {
                let lvc = prior.log_vars[[c, j]];
                let lvz = post.log_variance[[l, j]];
                let diff = post.mean[[l, j]] - prior.means[[c, j]];
                k += lvc - lvz + (lvz - lvc).exp() + diff * diff * (-lvc).exp() - T::one();
            }
            out[[l, c]] = half * k;
        }
    }
    out
}

/// Batch mean of `Σ_c q_c KL(N(μ_z, σ_z²) || N(μ_c, σ_c²))`.
pub fn kl_gaussian_mixture<T: Scalar>(
    posterior: &LatentPosterior<T>,
    prior: &PriorParams<T>,
    q: &Responsibilities<T>,
) -> Result<T> {
    if posterior.mean.ncols() != prior.means.ncols()
        || q.values.dim() != (posterior.len(), prior.clusters())
    {
        return Err(shape_err(format!(
            "posterior {:?}, prior means {:?}, responsibilities {:?}",
            posterior.mean.dim(),
            prior.means.dim(),
            q.values.dim()
        )));
    }
    let k = component_kl(posterior, prior);
    let total: T = (&k * &q.values).iter().copied().sum();
    Ok(total / T::of(posterior.len().max(1) as f64))
}

/// One mini-batch of the weighted objective.
pub struct LossInputs<'a, T> {
    /// Clean targets.
    pub x: &'a Array2<T>,
    /// Corrupted encoder inputs.
    pub x_hat: &'a Array2<T>,
    /// Standard-normal draws for the reparameterization, `L × d_z`.
    pub noise: &'a Array2<T>,
    pub regularizer_weight: f64,
    pub lambda: f64,
}

/// Evaluates `−recon + w (KL_cat + KL_gauss)` on a batch. With
/// `accumulate_grad` the gradients of the total are added to every
/// parameter's accumulator, prior included.
///
/// A non-finite total is reported as [`Error::NonFiniteLoss`] with step 0
/// and an empty phase; the trainer fills in its own context.
pub fn s3vdc_loss<T: Scalar>(
    model: &mut VadeModel<T>,
    inputs: &LossInputs<'_, T>,
    accumulate_grad: bool,
) -> Result<LossBreakdown> {
    let LossInputs {
        x,
        x_hat,
        noise,
        regularizer_weight,
        lambda,
    } = *inputs;
    if !(regularizer_weight > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "regularizer weight must be positive, got {regularizer_weight}"
        )));
    }
    if x.dim() != x_hat.dim() || x.ncols() != model.input_len() {
        return Err(shape_err(format!(
            "x {:?}, x_hat {:?}, model input {}",
            x.dim(),
            x_hat.dim(),
            model.input_len()
        )));
    }
    if noise.dim() != (x.nrows(), model.latent_dim()) {
        return Err(shape_err(format!("noise {:?}", noise.dim())));
    }
    let l_count = x.nrows();
    let (c_count, d) = (model.clusters(), model.latent_dim());

    let post = model.encoder_forward(x_hat.clone());
    let z = reparameterize(&post, noise.view())?;
    if let Some(row) = z.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLatent { row });
    }
    let prior = model.prior.clone();
    let inv_var = prior.log_vars.mapv(|v| (-v).exp());
    let v = log_density_kernel(z.view(), prior.means.view(), inv_var.view(), prior.log_vars.view());
    let (v_tilde, trace) = inverse_min_max_traced(&v, T::of(lambda));
    let log_w = prior.log_weights();
    let q = responsibilities_from_log_weights(&v_tilde.values, log_w.view());

    let raw = model.decoder_forward(z.clone());
    let decoded = match model.likelihood() {
        Likelihood::Bernoulli => raw.mapv(sigmoid),
        Likelihood::Gaussian => raw.clone(),
    };
    let dec_log_var = model.decoder_log_variance().cloned();
    let recon = reconstruction_term(x.view(), decoded.view(), model.likelihood(), dec_log_var.as_ref().map(|a| a.view()))?;
    let weights = log_w.mapv(T::exp);
    let kl_cat = kl_categorical(&q, weights.view())?;
    let k = component_kl(&post, &prior);
    let kl_gauss = (&k * &q.values).iter().copied().sum::<T>() / T::of(l_count as f64);

    let breakdown = LossBreakdown::compose(recon.f64(), kl_cat.f64(), kl_gauss.f64(), regularizer_weight);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            phase: String::new(),
            detail: format!(
                "reconstruction={} kl_categorical={} kl_gaussian={}",
                breakdown.reconstruction, breakdown.kl_categorical, breakdown.kl_gaussian
            ),
        });
    }
    if !accumulate_grad {
        return Ok(breakdown);
    }

    let inv_b = T::one() / T::of(l_count as f64);
    let w = T::of(regularizer_weight);
    let half = T::of(0.5);

    // reconstruction, through the decoder
    let mut g_raw = Array2::zeros(raw.dim());
    match model.likelihood() {
        Likelihood::Bernoulli => {
            let lo = T::of(PROB_CLAMP);
            ndarray::Zip::from(&mut g_raw)
                .and(&decoded)
                .and(x)
                .for_each(|g, &p, &xi| {
                    if p > lo && p < T::one() - lo {
                        *g = (p - xi) * inv_b;
                    }
                });
        }
        Likelihood::Gaussian => {
            let lv = dec_log_var.clone().unwrap_or_else(|| Array1::zeros(x.ncols()));
            let mut g_lv = Array1::<T>::zeros(x.ncols());
            let mut residual_sq = Array1::<T>::zeros(x.ncols());
            for l in 0..l_count {
                for k in 0..x.ncols() {
                    let iv = (-lv[k]).exp();
                    let diff = x[[l, k]] - decoded[[l, k]];
                    g_raw[[l, k]] = -diff * iv * inv_b;
                    g_lv[k] += half * (T::one() - diff * diff * iv) * inv_b;
                    residual_sq[k] += diff * diff * inv_b;
                }
            }
            model.residual_sq = Some(residual_sq);
            if let Some((_, grad)) = model.decoder_log_var.as_mut() {
                *grad += &g_lv;
            }
        }
    }
    let mut g_z = model.decoder_backward(g_raw);

    // both KL terms, directly
    let tiny = T::min_positive_value();
    let mut g_q = Array2::<T>::zeros((l_count, c_count));
    let mut g_log_w = Array1::<T>::zeros(c_count);
    let mut g_mu_z = Array2::<T>::zeros((l_count, d));
    let mut g_lv_z = Array2::<T>::zeros((l_count, d));
    let mut g_mu_c = Array2::<T>::zeros((c_count, d));
    let mut g_lv_c = Array2::<T>::zeros((c_count, d));
    for l in 0..l_count {
        for c in 0..c_count {
            let qc = q.values[[l, c]];
            g_q[[l, c]] = w * inv_b * (qc.max(tiny).ln() + T::one() - log_w[c] + k[[l, c]]);
            g_log_w[c] -= w * inv_b * qc;
            let s = w * inv_b * qc;
            for j in 0..d {
                let lvc = prior.log_vars[[c, j]];
                let lvz = post.log_variance[[l, j]];
                let diff = post.mean[[l, j]] - prior.means[[c, j]];
                let ivc = (-lvc).exp();
                let ratio = (lvz - lvc).exp();
                g_mu_z[[l, j]] += s * diff * ivc;
                g_lv_z[[l, j]] += s * half * (ratio - T::one());
                g_mu_c[[c, j]] -= s * diff * ivc;
                g_lv_c[[c, j]] += s * half * (T::one() - ratio - diff * diff * ivc);
            }
        }
    }

    // softmax over log π + Ṽ
    let mut g_v_tilde = Array2::<T>::zeros((c_count, l_count));
    for l in 0..l_count {
        let dot: T = (0..c_count).map(|c| q.values[[l, c]] * g_q[[l, c]]).sum();
        for c in 0..c_count {
            let ga = q.values[[l, c]] * (g_q[[l, c]] - dot);
            g_log_w[c] += ga;
            g_v_tilde[[c, l]] = ga;
        }
    }

    // inverse min-max rescaling
    let mut g_v = Array2::<T>::zeros((c_count, l_count));
    if let Some(tr) = trace {
        let lam = T::of(lambda);
        let range = tr.max - tr.min;
        let scale = lam / range;
        let r2 = range * range;
        let mut g_min = T::zero();
        let mut g_max = T::zero();
        ndarray::Zip::from(&mut g_v)
            .and(&g_v_tilde)
            .and(&v)
            .for_each(|gv, &gt, &vi| {
                *gv = gt * scale;
                g_min += gt * lam * (vi - tr.max) / r2;
                g_max -= gt * lam * (vi - tr.min) / r2;
            });
        g_v[tr.argmin] += g_min;
        g_v[tr.argmax] += g_max;
    }

    // log densities, to z and the prior components
    for c in 0..c_count {
        for l in 0..l_count {
            let gv = g_v[[c, l]];
            if gv == T::zero() {
                continue;
            }
            for j in 0..d {
                let diff = z[[l, j]] - prior.means[[c, j]];
                let iv = inv_var[[c, j]];
                g_z[[l, j]] -= gv * diff * iv;
                g_mu_c[[c, j]] += gv * diff * iv;
                g_lv_c[[c, j]] += gv * (half * diff * diff * iv - half);
            }
        }
    }

    // reparameterization
    g_mu_z += &g_z;
    for l in 0..l_count {
        for j in 0..d {
            g_lv_z[[l, j]] += g_z[[l, j]] * half * (half * post.log_variance[[l, j]]).exp() * noise[[l, j]];
        }
    }
    model.encoder_backward(g_mu_z, g_lv_z);

    // log π = logits − logsumexp(logits)
    let total_g: T = g_log_w.iter().copied().sum();
    let grads = &mut model.prior_grads;
    for c in 0..c_count {
        grads.logits[c] += g_log_w[c] - weights[c] * total_g;
    }
    grads.means += &g_mu_c;
    grads.log_vars += &g_lv_c;
    Ok(breakdown)
}
