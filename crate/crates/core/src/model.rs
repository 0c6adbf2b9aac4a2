//! The variational clustering network: an encoder producing `q(z|x)`, a
//! decoder producing the observation-model parameters, and the trainable
//! mixture prior.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{self, Decoder, LatentPosterior, MixturePrior, VAR_FLOOR, WEIGHT_FLOOR};
use crate::nn::{Conv2d, ConvGeometry, ConvTranspose2d, Layer, Linear, ParamMut, ParamRef, Sequential};
use crate::scalar::Scalar;

/// Encoder log-variances are clamped to this symmetric range.
pub const POSTERIOR_LOG_VAR_LIMIT: f64 = 30.0;
/// Range of the per-feature decoder log-variance (Gaussian observations).
pub const DECODER_LOG_VAR_RANGE: (f64, f64) = (-9.2, 9.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Data in `[0, 1]`; decoder outputs `μ_x` through a sigmoid.
    Bernoulli,
    /// Real-valued data; decoder outputs `μ_x` plus a learned per-feature
    /// log-variance.
    Gaussian,
}

fn default_cnn_channels() -> [usize; 3] {
    [32, 64, 128]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Mlp {
        hidden: Vec<usize>,
    },
    /// Three strided convolutions (kernels 5, 5, 3) mirrored by transposed
    /// convolutions in the decoder.
    Cnn {
        #[serde(default = "default_cnn_channels")]
        channels: [usize; 3],
    },
}

/// Shape of one sample; rows of a batch are flattened `channels × height × width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SampleShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for SampleShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub sample_shape: SampleShape,
    pub latent_dim: usize,
    pub clusters: usize,
    pub likelihood: Likelihood,
    pub architecture: Architecture,
}

/// Trainable mixture prior: softmax logits, means and log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams<T> {
    pub logits: Array1<T>,
    pub means: Array2<T>,
    pub log_vars: Array2<T>,
}

impl<T: Scalar> PriorParams<T> {
    pub fn from_prior(prior: &MixturePrior) -> Self {
        Self {
            logits: prior.weights().mapv(|w| T::of(w.ln())),
            means: prior.means().mapv(T::of),
            log_vars: prior.variances().mapv(|v| T::of(v.ln())),
        }
    }

    pub fn clusters(&self) -> usize {
        self.logits.len()
    }

    pub fn log_weights(&self) -> Array1<T> {
        let max = self.logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + self.logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
        self.logits.mapv(|l| l - lse)
    }

    pub fn weights(&self) -> Array1<T> {
        self.log_weights().mapv(T::exp)
    }

    pub fn variances(&self) -> Array2<T> {
        self.log_vars.mapv(T::exp)
    }

    pub fn to_prior(&self) -> Result<MixturePrior> {
        MixturePrior::floored(
            self.weights().mapv(T::f64),
            self.means.mapv(T::f64),
            self.variances().mapv(T::f64),
        )
    }

    /// Keeps every weight above the floor and every variance above its floor.
    fn project(&mut self) {
        let min_var = T::of(VAR_FLOOR.ln());
        self.log_vars.mapv_inplace(|v| v.max(min_var));
        let c = self.logits.len() as f64;
        // softmax_i >= exp(l_i - l_max) / C, so this bound keeps weights above the floor
        let max = self.logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lowest = max + T::of((WEIGHT_FLOOR * c).ln());
        self.logits.mapv_inplace(|l| l.max(lowest));
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PriorGrads<T> {
    pub logits: Array1<T>,
    pub means: Array2<T>,
    pub log_vars: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct VadeModel<T> {
    pub spec: ModelSpec,
    encoder: Sequential<T>,
    mean_head: Linear<T>,
    log_var_head: Linear<T>,
    decoder: Sequential<T>,
    pub(crate) decoder_log_var: Option<(Array1<T>, Array1<T>)>,
    pub prior: PriorParams<T>,
    pub(crate) prior_grads: PriorGrads<T>,
    /// Clamp mask of the last training forward pass.
    log_var_clamped: Option<Array2<bool>>,
    /// Per-feature mean squared residual of the last Gaussian training pass.
    pub(crate) residual_sq: Option<Array1<T>>,
}

impl<T: Scalar> VadeModel<T> {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        if spec.latent_dim == 0 || spec.clusters == 0 || spec.sample_shape.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "model needs positive latent_dim, clusters and sample size: {spec:?}"
            )));
        }
        let d_in = spec.sample_shape.len();
        let (encoder, feature_len, decoder) = match &spec.architecture {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::InvalidArgument("hidden layer widths must be positive".into()));
                }
                let mut enc = Vec::new();
                let mut width = d_in;
                for &h in hidden {
                    enc.push(Layer::Linear(Linear::new(rng, width, h)));
                    enc.push(Layer::relu());
                    width = h;
                }
                let mut dec = Vec::new();
                let mut dwidth = spec.latent_dim;
                for &h in hidden.iter().rev() {
                    dec.push(Layer::Linear(Linear::new(rng, dwidth, h)));
                    dec.push(Layer::relu());
                    dwidth = h;
                }
                dec.push(Layer::Linear(Linear::new(rng, dwidth, d_in)));
                (Sequential::new(enc), width, Sequential::new(dec))
            }
            Architecture::Cnn { channels } => {
                let s = spec.sample_shape;
                let g1 = ConvGeometry::same(s.channels, s.height, s.width, channels[0], 5, 2);
                g1.check()?;
                let g2 = ConvGeometry::same(channels[0], g1.out_h(), g1.out_w(), channels[1], 5, 2);
                g2.check()?;
                let g3 = ConvGeometry::valid(channels[1], g2.out_h(), g2.out_w(), channels[2], 3, 2);
                g3.check()?;
                let enc = vec![
                    Layer::Conv(Conv2d::new(rng, g1)?),
                    Layer::relu(),
                    Layer::Conv(Conv2d::new(rng, g2)?),
                    Layer::relu(),
                    Layer::Conv(Conv2d::new(rng, g3)?),
                    Layer::relu(),
                ];
                let flat = g3.out_len();
                let dec = vec![
                    Layer::Linear(Linear::new(rng, spec.latent_dim, flat)),
                    Layer::relu(),
                    Layer::ConvTranspose(ConvTranspose2d::new(rng, g3)?),
                    Layer::relu(),
                    Layer::ConvTranspose(ConvTranspose2d::new(rng, g2)?),
                    Layer::relu(),
                    Layer::ConvTranspose(ConvTranspose2d::new(rng, g1)?),
                ];
                (Sequential::new(enc), flat, Sequential::new(dec))
            }
        };
        let mean_head = Linear::new(rng, feature_len, spec.latent_dim);
        let log_var_head = Linear::new(rng, feature_len, spec.latent_dim);
        let decoder_log_var = match spec.likelihood {
            Likelihood::Gaussian => Some((Array1::zeros(d_in), Array1::zeros(d_in))),
            Likelihood::Bernoulli => None,
        };
        let (c, d) = (spec.clusters, spec.latent_dim);
        let prior = PriorParams {
            logits: Array1::zeros(c),
            means: Array2::from_shape_simple_fn((c, d), || {
                T::of(rng.sample::<f64, _>(rand_distr::StandardNormal))
            }),
            log_vars: Array2::zeros((c, d)),
        };
        let prior_grads = PriorGrads {
            logits: Array1::zeros(c),
            means: Array2::zeros((c, d)),
            log_vars: Array2::zeros((c, d)),
        };
        Ok(Self {
            spec,
            encoder,
            mean_head,
            log_var_head,
            decoder,
            decoder_log_var,
            prior,
            prior_grads,
            log_var_clamped: None,
            residual_sq: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn clusters(&self) -> usize {
        self.spec.clusters
    }

    pub fn input_len(&self) -> usize {
        self.spec.sample_shape.len()
    }

    pub fn likelihood(&self) -> Likelihood {
        self.spec.likelihood
    }

    /// Converts a batch of stored samples to the model's precision.
    pub fn cast_batch(x: ArrayView2<f32>) -> Array2<T> {
        x.mapv(|v| T::of(v as f64))
    }

    fn clamp_log_var(raw: Array2<T>) -> (Array2<T>, Array2<bool>) {
        let lim = T::of(POSTERIOR_LOG_VAR_LIMIT);
        let mask = raw.mapv(|v| v > lim || v < -lim);
        (raw.mapv(|v| v.max(-lim).min(lim)), mask)
    }

    /// `q(z | x)` without caching anything.
    pub fn encode(&self, x: &Array2<T>) -> LatentPosterior<T> {
        let h = self.encoder.infer(x.clone());
        let mean = self.mean_head.infer(&h);
        let (log_variance, _) = Self::clamp_log_var(self.log_var_head.infer(&h));
        LatentPosterior { mean, log_variance }
    }

    /// Posterior means for a stored batch, in double precision.
    pub fn encode_means(&self, x: ArrayView2<f32>) -> Array2<f64> {
        self.encode(&Self::cast_batch(x)).mean.mapv(T::f64)
    }

    /// Decoder output before the observation link (logits or means).
    fn decode_raw(&self, z: &Array2<T>) -> Array2<T> {
        self.decoder.infer(z.clone())
    }

    /// Observation mean `μ_x` for each latent row.
    pub fn decode(&self, z: &Array2<T>) -> Array2<T> {
        let raw = self.decode_raw(z);
        match self.spec.likelihood {
            Likelihood::Bernoulli => raw.mapv(sigmoid),
            Likelihood::Gaussian => raw,
        }
    }

    pub fn decoder_log_variance(&self) -> Option<&Array1<T>> {
        self.decoder_log_var.as_ref().map(|(v, _)| v)
    }

    pub(crate) fn encoder_forward(&mut self, x_hat: Array2<T>) -> LatentPosterior<T> {
        let h = self.encoder.forward(x_hat);
        let mean = self.mean_head.forward(h.clone());
        let (log_variance, mask) = Self::clamp_log_var(self.log_var_head.forward(h));
        self.log_var_clamped = Some(mask);
        LatentPosterior { mean, log_variance }
    }

    pub(crate) fn encoder_backward(&mut self, grad_mean: Array2<T>, mut grad_log_var: Array2<T>) {
        if let Some(mask) = &self.log_var_clamped {
            ndarray::Zip::from(&mut grad_log_var).and(mask).for_each(|g, &m| {
                if m {
                    *g = T::zero();
                }
            });
        }
        let gh = self.mean_head.backward(&grad_mean) + self.log_var_head.backward(&grad_log_var);
        self.encoder.backward(gh);
    }

    pub(crate) fn decoder_forward(&mut self, z: Array2<T>) -> Array2<T> {
        self.decoder.forward(z)
    }

    pub(crate) fn decoder_backward(&mut self, grad_raw: Array2<T>) -> Array2<T> {
        self.decoder.backward(grad_raw)
    }

    /// Every trainable tensor with its gradient, in a fixed order; the
    /// prior tensors are always the last three.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.encoder.params_mut("encoder", &mut out);
        self.mean_head.params_mut("mean_head", &mut out);
        self.log_var_head.params_mut("log_var_head", &mut out);
        self.decoder.params_mut("decoder", &mut out);
        if let Some((value, grad)) = self.decoder_log_var.as_mut() {
            out.push(ParamMut {
                name: "decoder_log_var".into(),
                value: value.as_slice_mut().expect("contiguous"),
                grad: grad.as_slice_mut().expect("contiguous"),
            });
        }
        out.push(ParamMut {
            name: "prior.logits".into(),
            value: self.prior.logits.as_slice_mut().expect("contiguous"),
            grad: self.prior_grads.logits.as_slice_mut().expect("contiguous"),
        });
        out.push(ParamMut {
            name: "prior.means".into(),
            value: self.prior.means.as_slice_mut().expect("contiguous"),
            grad: self.prior_grads.means.as_slice_mut().expect("contiguous"),
        });
        out.push(ParamMut {
            name: "prior.log_vars".into(),
            value: self.prior.log_vars.as_slice_mut().expect("contiguous"),
            grad: self.prior_grads.log_vars.as_slice_mut().expect("contiguous"),
        });
        out
    }

    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.encoder.params("encoder", &mut out);
        self.mean_head.params("mean_head", &mut out);
        self.log_var_head.params("log_var_head", &mut out);
        self.decoder.params("decoder", &mut out);
        if let Some((value, _)) = self.decoder_log_var.as_ref() {
            out.push(ParamRef {
                name: "decoder_log_var".into(),
                value: value.as_slice().expect("contiguous"),
            });
        }
        out.push(ParamRef {
            name: "prior.logits".into(),
            value: self.prior.logits.as_slice().expect("contiguous"),
        });
        out.push(ParamRef {
            name: "prior.means".into(),
            value: self.prior.means.as_slice().expect("contiguous"),
        });
        out.push(ParamRef {
            name: "prior.log_vars".into(),
            value: self.prior.log_vars.as_slice().expect("contiguous"),
        });
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Re-imposes the prior floors and the decoder log-variance range after
    /// an optimizer step.
    pub fn project(&mut self) {
        self.prior.project();
        if let Some((value, _)) = self.decoder_log_var.as_mut() {
            let (lo, hi) = (T::of(DECODER_LOG_VAR_RANGE.0), T::of(DECODER_LOG_VAR_RANGE.1));
            value.mapv_inplace(|v| v.max(lo).min(hi));
        }
    }

    /// Moves the Gaussian decoder variance toward the mean squared residual
    /// of the last training pass, `σ² ← (1 − rate) σ² + rate · r²`, which is
    /// the maximizer of the reconstruction term for the current decoder
    /// mean. No-op for Bernoulli observations.
    pub fn update_decoder_variance(&mut self, rate: f64) {
        let (Some((value, _)), Some(r)) = (self.decoder_log_var.as_mut(), self.residual_sq.as_ref()) else {
            return;
        };
        let (lo, hi) = DECODER_LOG_VAR_RANGE;
        for (lv, &r2) in value.iter_mut().zip(r) {
            let var = (1.0 - rate) * lv.f64().exp() + rate * r2.f64();
            *lv = T::of(var.ln().clamp(lo, hi));
        }
    }

    /// Drops the decoder log-variance gradient so an optimizer step leaves
    /// it untouched.
    pub fn freeze_decoder_variance(&mut self) {
        if let Some((_, grad)) = self.decoder_log_var.as_mut() {
            grad.fill(T::zero());
        }
    }

    pub fn mixture_prior(&self) -> Result<MixturePrior> {
        self.prior.to_prior()
    }

    pub fn install_prior(&mut self, prior: &MixturePrior) -> Result<()> {
        if prior.clusters() != self.spec.clusters || prior.latent_dim() != self.spec.latent_dim {
            return Err(Error::Shape(format!(
                "prior has {} clusters × {} dims, model expects {} × {}",
                prior.clusters(),
                prior.latent_dim(),
                self.spec.clusters,
                self.spec.latent_dim
            )));
        }
        self.prior = PriorParams::from_prior(prior);
        self.prior.project();
        Ok(())
    }

    /// Hard cluster assignments from the exact posterior `p(c | μ_z)`.
    pub fn predict(&self, x: ArrayView2<f32>) -> Result<Prediction> {
        let z = self.encode_means(x);
        let prior = self.mixture_prior()?;
        let q = mixture::exact_posterior(&prior, z.view())?;
        let clusters = q.hard_assignments();
        let confidence = q
            .values
            .outer_iter()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .collect();
        Ok(Prediction {
            latents: z,
            clusters,
            confidence,
        })
    }

    /// Runs `predict` over a large matrix in fixed-size chunks.
    pub fn predict_chunked(&self, x: ArrayView2<f32>, chunk: usize) -> Result<Prediction> {
        let mut latents = Vec::new();
        let mut clusters = Vec::new();
        let mut confidence = Vec::new();
        for part in x.axis_chunks_iter(Axis(0), chunk.max(1)) {
            let p = self.predict(part)?;
            latents.push(p.latents);
            clusters.extend(p.clusters);
            confidence.extend(p.confidence);
        }
        let views: Vec<_> = latents.iter().map(|a| a.view()).collect();
        let latents = if views.is_empty() {
            Array2::zeros((0, self.spec.latent_dim))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("same width")
        };
        Ok(Prediction {
            latents,
            clusters,
            confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub latents: Array2<f64>,
    pub clusters: Vec<usize>,
    pub confidence: Vec<f64>,
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Decoder for VadeModel<T> {
    fn sample_len(&self) -> usize {
        self.input_len()
    }

    fn decode_mean(&self, z: ArrayView2<f64>) -> Array2<f32> {
        self.decode(&z.mapv(T::of)).mapv(|v| v.f64() as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(arch: Architecture, likelihood: Likelihood) -> ModelSpec {
        ModelSpec {
            sample_shape: SampleShape {
                channels: 1,
                height: 12,
                width: 12,
            },
            latent_dim: 3,
            clusters: 4,
            likelihood,
            architecture: arch,
        }
    }

    #[test]
    fn builds_both_architectures() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for arch in [
            Architecture::Mlp { hidden: vec![16, 8] },
            Architecture::Cnn { channels: [4, 4, 8] },
        ] {
            let m = VadeModel::<f32>::new(spec(arch, Likelihood::Bernoulli), &mut rng).unwrap();
            let x = Array2::from_elem((5, 144), 0.5f32);
            let post = m.encode(&x);
            assert_eq!(post.mean.dim(), (5, 3));
            let out = m.decode(&post.mean);
            assert_eq!(out.dim(), (5, 144));
            assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn projection_enforces_floors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = VadeModel::<f64>::new(spec(Architecture::Mlp { hidden: vec![4] }, Likelihood::Gaussian), &mut rng).unwrap();
        m.prior.logits[0] = 100.0;
        m.prior.log_vars[[1, 1]] = -40.0;
        m.project();
        let prior = m.mixture_prior().unwrap();
        assert!(prior.weights().iter().all(|&w| w >= WEIGHT_FLOOR * 0.999));
        assert!(prior.variances().iter().all(|&v| v >= VAR_FLOOR * 0.999));
    }

    #[test]
    fn install_prior_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = VadeModel::<f64>::new(spec(Architecture::Mlp { hidden: vec![4] }, Likelihood::Bernoulli), &mut rng).unwrap();
        let prior = MixturePrior::new(
            ndarray::array![0.1, 0.2, 0.3, 0.4],
            Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64),
            Array2::from_elem((4, 3), 0.25),
        )
        .unwrap();
        m.install_prior(&prior).unwrap();
        let back = m.mixture_prior().unwrap();
        for (a, b) in back.weights().iter().zip(prior.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(m
            .install_prior(&MixturePrior::new(ndarray::array![0.5, 0.5], Array2::zeros((2, 3)), Array2::ones((2, 3))).unwrap())
            .is_err());
    }
}
