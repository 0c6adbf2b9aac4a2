//! Latent-space math of the mixture model: reparameterized sampling,
//! per-cluster Gaussian log densities, the inverse min-max rescaling that
//! keeps exponentiation bounded, cluster responsibilities and generative
//! sampling from the prior.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Smallest variance any mixture component may take.
pub const VAR_FLOOR: f64 = 1e-6;
/// Smallest cluster weight; weights are renormalized after flooring.
pub const WEIGHT_FLOOR: f64 = 1e-10;
/// Below this value range the log-density matrix is treated as constant.
pub const RANGE_EPSILON: f64 = 1e-12;
pub const DEFAULT_LAMBDA: f64 = 50.0;

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Gaussian mixture prior over the latent space, diagonal covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePrior {
    weights: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
}

impl MixturePrior {
    /// Validates the invariants without modifying anything.
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let prior = Self {
            weights,
            means,
            variances,
        };
        prior.validate()?;
        Ok(prior)
    }

    /// Applies the weight and variance floors, renormalizes the weights and
    /// then validates.
    pub fn floored(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        if weights.iter().chain(variances.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "mixture weights and variances must be finite".into(),
            ));
        }
        let mut weights = weights.mapv(|w| w.max(WEIGHT_FLOOR));
        let total = weights.sum();
        weights /= total;
        let variances = variances.mapv(|v| v.max(VAR_FLOOR));
        Self::new(weights, means, variances)
    }

    fn validate(&self) -> Result<()> {
        let c = self.weights.len();
        if c == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        if self.means.nrows() != c || self.variances.nrows() != c {
            return Err(shape_err(format!(
                "{} weights but {} mean rows and {} variance rows",
                c,
                self.means.nrows(),
                self.variances.nrows()
            )));
        }
        if self.means.ncols() == 0 || self.means.ncols() != self.variances.ncols() {
            return Err(shape_err(format!(
                "latent dims disagree: means {}, variances {}",
                self.means.ncols(),
                self.variances.ncols()
            )));
        }
        let sum = self.weights.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("weights sum to {sum}, expected 1")));
        }
        if let Some(w) = self.weights.iter().find(|&&w| !(w >= WEIGHT_FLOOR * (1.0 - 1e-9))) {
            return Err(Error::InvalidArgument(format!("weight {w} below floor {WEIGHT_FLOOR}")));
        }
        if let Some(v) = self.variances.iter().find(|&&v| !(v >= VAR_FLOOR * (1.0 - 1e-9))) {
            return Err(Error::InvalidArgument(format!("variance {v} below floor {VAR_FLOOR}")));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("non-finite component mean".into()));
        }
        Ok(())
    }

    pub fn clusters(&self) -> usize {
        self.weights.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    /// `ln p(z | c)` for every cluster and row of `z`.
    pub fn log_density(&self, z: ArrayView2<f64>) -> Result<LogDensityMatrix<f64>> {
        gaussian_log_density(z, self.means.view(), self.variances.view())
    }

    /// `ln p(z) = ln Σ_c π_c N(z | μ_c, σ_c²)` per row, via max-shifted summation.
    pub fn log_marginal(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        let v = self.log_density(z)?;
        let log_w = self.weights.mapv(f64::ln);
        let mut out = Array1::zeros(z.nrows());
        for (l, o) in out.iter_mut().enumerate() {
            let col = v.values.column(l);
            *o = log_sum_exp(col.iter().zip(log_w.iter()).map(|(a, b)| a + b));
        }
        Ok(out)
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Encoder output: mean and log-variance of `q(z | x)`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior<T> {
    pub mean: Array2<T>,
    pub log_variance: Array2<T>,
}

impl<T: Scalar> LatentPosterior<T> {
    pub fn new(mean: Array2<T>, log_variance: Array2<T>) -> Result<Self> {
        if mean.dim() != log_variance.dim() {
            return Err(shape_err(format!(
                "posterior mean {:?} vs log-variance {:?}",
                mean.dim(),
                log_variance.dim()
            )));
        }
        Ok(Self { mean, log_variance })
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }
}

/// Per-sample cluster posterior `q(c | x)`, shape `L × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities<T> {
    pub values: Array2<T>,
}

impl<T: Scalar> Responsibilities<T> {
    pub fn hard_assignments(&self) -> Vec<usize> {
        self.values
            .outer_iter()
            .map(|row| argmax(row.iter().copied()))
            .collect()
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(it: impl Iterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v: Option<T> = None;
    for (i, v) in it.enumerate() {
        if best_v.is_none_or(|b| v > b) {
            best = i;
            best_v = Some(v);
        }
    }
    best
}

/// Per-cluster log densities `V[c][l] = ln p(z_l | c)`, shape `C × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityMatrix<T> {
    pub values: Array2<T>,
}

/// `z = mean + exp(log_variance / 2) ⊙ noise`.
pub fn reparameterize<T: Scalar>(posterior: &LatentPosterior<T>, noise: ArrayView2<T>) -> Result<Array2<T>> {
    if posterior.mean.dim() != noise.dim() {
        return Err(shape_err(format!(
            "posterior {:?} vs noise {:?}",
            posterior.mean.dim(),
            noise.dim()
        )));
    }
    let half = T::of(0.5);
    let mut z = posterior.log_variance.mapv(|lv| (lv * half).exp());
    z *= &noise;
    z += &posterior.mean;
    Ok(z)
}

/// Diagonal-Gaussian log density of every row of `z` under every component.
pub fn gaussian_log_density<T: Scalar>(
    z: ArrayView2<T>,
    means: ArrayView2<T>,
    variances: ArrayView2<T>,
) -> Result<LogDensityMatrix<T>> {
    if means.dim() != variances.dim() || z.ncols() != means.ncols() {
        return Err(shape_err(format!(
            "z {:?}, means {:?}, variances {:?}",
            z.dim(),
            means.dim(),
            variances.dim()
        )));
    }
    if let Some(row) = z
        .outer_iter()
        .position(|r| r.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFiniteLatent { row });
    }
    let inv_var = variances.mapv(|v| T::one() / v);
    let log_var = variances.mapv(|v| v.ln());
    Ok(LogDensityMatrix {
        values: log_density_kernel(z, means, inv_var.view(), log_var.view()),
    })
}

/// Kernel shared with the training path, which carries log-variances.
pub(crate) fn log_density_kernel<T: Scalar>(
    z: ArrayView2<T>,
    means: ArrayView2<T>,
    inv_var: ArrayView2<T>,
    log_var: ArrayView2<T>,
) -> Array2<T> {
    let (c_count, d) = means.dim();
    let l_count = z.nrows();
    let half = T::of(0.5);
    let constant = T::of(HALF_LN_2PI) * T::of(d as f64);
    let mut out = Array2::zeros((c_count, l_count));
    for c in 0..c_count {
        let mu = means.row(c);
        let iv = inv_var.row(c);
        let log_det: T = log_var.row(c).iter().copied().sum();
        let base = -constant - half * log_det;
        for l in 0..l_count {
            let zl = z.row(l);
            let mut quad = T::zero();
            for k in 0..d {
                let diff = zl[k] - mu[k];
                quad += diff * diff * iv[k];
            }
            out[[c, l]] = base - half * quad;
        }
    }
    out
}

/// Location of the extreme entries of a log-density matrix, kept so the
/// training path can differentiate through the rescaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct MinMaxTrace<T> {
    pub argmin: (usize, usize),
    pub argmax: (usize, usize),
    pub min: T,
    pub max: T,
}

/// `λ (V - min V) / (max V - min V)` over the whole matrix, mapping into `[0, λ]`.
///
/// A matrix whose range is below [`RANGE_EPSILON`] carries no cluster signal
/// and maps to all zeros.
pub fn inverse_min_max<T: Scalar>(v: &LogDensityMatrix<T>, lambda: T) -> Result<LogDensityMatrix<T>> {
    if !(lambda > T::zero()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    Ok(inverse_min_max_traced(&v.values, lambda).0)
}

pub(crate) fn inverse_min_max_traced<T: Scalar>(
    v: &Array2<T>,
    lambda: T,
) -> (LogDensityMatrix<T>, Option<MinMaxTrace<T>>) {
    if v.is_empty() {
        return (LogDensityMatrix { values: v.clone() }, None);
    }
    let mut trace = MinMaxTrace {
        argmin: (0, 0),
        argmax: (0, 0),
        min: v[[0, 0]],
        max: v[[0, 0]],
    };
    for ((i, j), &x) in v.indexed_iter() {
        if x < trace.min {
            trace.min = x;
            trace.argmin = (i, j);
        }
        if x > trace.max {
            trace.max = x;
            trace.argmax = (i, j);
        }
    }
    let range = trace.max - trace.min;
    if !(range.f64() >= RANGE_EPSILON) {
        return (
            LogDensityMatrix {
                values: Array2::zeros(v.dim()),
            },
            None,
        );
    }
    let scale = lambda / range;
    let min = trace.min;
    (
        LogDensityMatrix {
            values: v.mapv(|x| ((x - min) * scale).min(lambda)),
        },
        Some(trace),
    )
}

/// `q[l][c] ∝ π_c exp(Ṽ[c][l])`, evaluated with a per-row max shift.
pub fn cluster_responsibilities<T: Scalar>(
    v_tilde: &LogDensityMatrix<T>,
    weights: ArrayView1<T>,
) -> Result<Responsibilities<T>> {
    if weights.len() != v_tilde.values.nrows() {
        return Err(shape_err(format!(
            "{} weights for {} clusters",
            weights.len(),
            v_tilde.values.nrows()
        )));
    }
    if weights.iter().any(|&w| !(w > T::zero())) {
        return Err(Error::InvalidArgument("weights must be strictly positive".into()));
    }
    let log_w = weights.mapv(|w| w.ln());
    Ok(responsibilities_from_log_weights(&v_tilde.values, log_w.view()))
}

pub(crate) fn responsibilities_from_log_weights<T: Scalar>(
    v: &Array2<T>,
    log_weights: ArrayView1<T>,
) -> Responsibilities<T> {
    let (c_count, l_count) = v.dim();
    let mut q = Array2::zeros((l_count, c_count));
    for l in 0..l_count {
        let mut row_max = T::neg_infinity();
        for c in 0..c_count {
            row_max = row_max.max(log_weights[c] + v[[c, l]]);
        }
        let mut total = T::zero();
        for c in 0..c_count {
            let e = (log_weights[c] + v[[c, l]] - row_max).exp();
            q[[l, c]] = e;
            total += e;
        }
        q.row_mut(l).mapv_inplace(|e| e / total);
    }
    Responsibilities { values: q }
}

/// Anything that can map latent vectors back to data space.
pub trait Decoder {
    /// Flattened length of one generated sample.
    fn sample_len(&self) -> usize;
    /// Decoder mean `μ_x` for each latent row.
    fn decode_mean(&self, z: ArrayView2<f64>) -> Array2<f32>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBatch {
    pub samples: Array2<f32>,
    pub clusters: Vec<usize>,
    pub latents: Array2<f64>,
}

/// Draws `c ~ Cat(π)` (or uses `cluster`), `z ~ N(μ_c, σ_c² I)` and decodes
/// the distribution mean.
pub fn sample_generative<D: Decoder + ?Sized, R: Rng + ?Sized>(
    prior: &MixturePrior,
    decoder: &D,
    count: usize,
    cluster: Option<usize>,
    rng: &mut R,
) -> Result<GeneratedBatch> {
    if let Some(index) = cluster {
        if index >= prior.clusters() {
            return Err(Error::ClusterOutOfRange {
                index,
                clusters: prior.clusters(),
            });
        }
    }
    let d = prior.latent_dim();
    let mut clusters = Vec::with_capacity(count);
    let mut latents = Array2::zeros((count, d));
    let cumulative: Vec<f64> = prior
        .weights()
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    for i in 0..count {
        let c = match cluster {
            Some(c) => c,
            None => {
                let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
                cumulative
                    .iter()
                    .position(|&edge| u < edge)
                    .unwrap_or(cumulative.len() - 1)
            }
        };
        clusters.push(c);
        for k in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            latents[[i, k]] = prior.means()[[c, k]] + prior.variances()[[c, k]].sqrt() * eps;
        }
    }
    let samples = if count == 0 {
        Array2::zeros((0, decoder.sample_len()))
    } else {
        decoder.decode_mean(latents.view())
    };
    Ok(GeneratedBatch {
        samples,
        clusters,
        latents,
    })
}

/// Exact posterior `p(c | z)` without rescaling; used for hard assignments,
/// where it does not depend on which other samples share the batch.
pub fn exact_posterior(prior: &MixturePrior, z: ArrayView2<f64>) -> Result<Responsibilities<f64>> {
    let v = prior.log_density(z)?;
    let log_w = prior.weights().mapv(f64::ln);
    Ok(responsibilities_from_log_weights(&v.values, log_w.view()))
}

#[cfg(test)]
pub(crate) fn row_sums<T: Scalar>(a: &Array2<T>) -> Array1<T> {
    a.sum_axis(ndarray::Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn posterior(mean: Array2<f64>, lv: Array2<f64>) -> LatentPosterior<f64> {
        LatentPosterior::new(mean, lv).unwrap()
    }

    #[test]
    fn reparameterize_identity_when_standard() {
        let noise = array![[0.3, -1.2], [2.0, 0.1]];
        let p = posterior(Array2::zeros((2, 2)), Array2::zeros((2, 2)));
        assert_eq!(reparameterize(&p, noise.view()).unwrap(), noise);
    }

    #[test]
    fn reparameterize_degenerate_variance_returns_mean() {
        let mean = array![[1.5, -3.0]];
        let p = posterior(mean.clone(), Array2::from_elem((1, 2), -50.0));
        let z = reparameterize(&p, array![[4.0, -7.0]].view()).unwrap();
        for (a, b) in z.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn reparameterize_hand_evaluated() {
        let p = posterior(array![[1.0, 2.0]], array![[4f64.ln(), 9f64.ln()]]);
        let z = reparameterize(&p, array![[1.0, -1.0]].view()).unwrap();
        assert_abs_diff_eq!(z[[0, 0]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z[[0, 1]], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn reparameterize_rejects_shape_mismatch() {
        let p = posterior(Array2::zeros((2, 2)), Array2::zeros((2, 2)));
        assert!(matches!(
            reparameterize(&p, Array2::zeros((2, 3)).view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn log_density_examples() {
        let v = gaussian_log_density(array![[0.7]].view(), array![[0.7]].view(), array![[1.0]].view()).unwrap();
        assert_abs_diff_eq!(v.values[[0, 0]], -0.918_938_533_204_672_7, epsilon = 1e-12);

        let v = gaussian_log_density(
            array![[0.1, -0.2]].view(),
            array![[0.1, -0.2]].view(),
            array![[1.0, 1.0]].view(),
        )
        .unwrap();
        assert_abs_diff_eq!(v.values[[0, 0]], -1.837_877_066_409_345_4, epsilon = 1e-12);

        let v = gaussian_log_density(array![[0.0]].view(), array![[1.0]].view(), array![[4.0]].view()).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 4f64.ln() - 1.0 / 8.0;
        assert_abs_diff_eq!(v.values[[0, 0]], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(v.values[[0, 0]], -1.737, epsilon = 1e-3);
    }

    #[test]
    fn log_density_names_offending_row() {
        let z = array![[0.0], [f64::NAN], [1.0]];
        let err = gaussian_log_density(z.view(), array![[0.0]].view(), array![[1.0]].view()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLatent { row: 1 }));
    }

    #[test]
    fn inverse_min_max_examples() {
        let v = LogDensityMatrix {
            values: array![[-100.0, -50.0], [-25.0, 0.0]],
        };
        let t = inverse_min_max(&v, 50.0).unwrap();
        assert_eq!(t.values, array![[0.0, 25.0], [37.5, 50.0]]);

        let flat = LogDensityMatrix {
            values: Array2::from_elem((3, 4), -7.25),
        };
        assert_eq!(inverse_min_max(&flat, 50.0).unwrap().values, Array2::<f64>::zeros((3, 4)));

        assert!(inverse_min_max(&v, 0.0).is_err());
    }

    #[test]
    fn responsibilities_examples() {
        let even = LogDensityMatrix {
            values: array![[3.0, 0.0], [3.0, 0.0]],
        };
        let q = cluster_responsibilities(&even, array![0.5, 0.5].view()).unwrap();
        for v in q.values.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }

        let sharp = LogDensityMatrix {
            values: array![[50.0], [0.0]],
        };
        let q = cluster_responsibilities(&sharp, array![0.5, 0.5].view()).unwrap();
        let expected_low = (-50f64).exp() / (1.0 + (-50f64).exp());
        assert_abs_diff_eq!(q.values[[0, 0]], 1.0 / (1.0 + (-50f64).exp()), epsilon = 1e-15);
        assert!((q.values[[0, 1]] - expected_low).abs() / expected_low < 1e-12);
        assert!((q.values[[0, 1]] - 1.9e-22).abs() < 0.05e-22);

        let zero = LogDensityMatrix {
            values: array![[0.0], [0.0]],
        };
        let q = cluster_responsibilities(&zero, array![0.9, 0.1].view()).unwrap();
        assert_abs_diff_eq!(q.values[[0, 0]], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(q.values[[0, 1]], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn prior_floors_and_validates() {
        let p = MixturePrior::floored(
            array![1.0, 0.0, 0.0],
            Array2::zeros((3, 2)),
            Array2::from_elem((3, 2), 0.0),
        )
        .unwrap();
        assert!(p.weights().iter().all(|&w| w >= WEIGHT_FLOOR * (1.0 - 1e-9)));
        assert_abs_diff_eq!(p.weights().sum(), 1.0, epsilon = 1e-12);
        assert!(p.variances().iter().all(|&v| v == VAR_FLOOR));

        assert!(MixturePrior::new(array![0.5, 0.6], Array2::zeros((2, 1)), Array2::ones((2, 1))).is_err());
        assert!(MixturePrior::new(array![0.5, 0.5], Array2::zeros((2, 1)), Array2::zeros((2, 1))).is_err());
        assert!(MixturePrior::new(array![0.5, 0.5], Array2::zeros((3, 1)), Array2::ones((2, 1))).is_err());
    }

    struct Identity;

    impl Decoder for Identity {
        fn sample_len(&self) -> usize {
            2
        }
        fn decode_mean(&self, z: ArrayView2<f64>) -> Array2<f32> {
            z.mapv(|v| v as f32)
        }
    }

    fn two_cluster_prior(w0: f64) -> MixturePrior {
        MixturePrior::floored(
            array![w0, 1.0 - w0],
            array![[-10.0, -10.0], [10.0, 10.0]],
            Array2::from_elem((2, 2), 0.01),
        )
        .unwrap()
    }

    #[test]
    fn generation_contracts() {
        let prior = two_cluster_prior(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let empty = sample_generative(&prior, &Identity, 0, None, &mut rng).unwrap();
        assert_eq!(empty.samples.dim(), (0, 2));

        let degenerate = two_cluster_prior(1.0);
        let batch = sample_generative(&degenerate, &Identity, 500, None, &mut rng).unwrap();
        assert!(batch.clusters.iter().all(|&c| c == 0));
        assert!(batch.samples.iter().all(|&v| v < -9.0));

        let a = sample_generative(&prior, &Identity, 50, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_generative(&prior, &Identity, 50, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        let fixed = sample_generative(&prior, &Identity, 20, Some(1), &mut rng).unwrap();
        assert!(fixed.clusters.iter().all(|&c| c == 1));
        assert!(matches!(
            sample_generative(&prior, &Identity, 1, Some(2), &mut rng),
            Err(Error::ClusterOutOfRange { index: 2, clusters: 2 })
        ));
    }

    #[test]
    fn log_marginal_matches_direct_sum() {
        let prior = two_cluster_prior(0.3);
        let z = array![[0.5, -0.25], [9.0, 11.0]];
        let lm = prior.log_marginal(z.view()).unwrap();
        let v = prior.log_density(z.view()).unwrap();
        for l in 0..2 {
            let direct = (0.3 * v.values[[0, l]].exp() + 0.7 * v.values[[1, l]].exp()).ln();
            if direct.is_finite() {
                assert_abs_diff_eq!(lm[l], direct, epsilon = 1e-9);
            }
        }
    }

    /// Log of the product of one-dimensional Gaussian densities.
    fn direct_log_density(z: &[f64], mu: &[f64], var: &[f64]) -> f64 {
        z.iter()
            .zip(mu)
            .zip(var)
            .map(|((z, m), v)| {
                let density = (-(z - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                density.ln()
            })
            .sum()
    }

    proptest! {
        #[test]
        fn responsibility_rows_on_simplex(
            vals in proptest::collection::vec(-1e4f64..1e4, 12),
            raw_w in proptest::collection::vec(1e-3f64..1.0, 3),
        ) {
            let v = LogDensityMatrix { values: Array::from_shape_vec((3, 4), vals).unwrap() };
            let total: f64 = raw_w.iter().sum();
            let w = Array1::from_iter(raw_w.iter().map(|x| x / total));
            let vt = inverse_min_max(&v, 50.0).unwrap();
            let q = cluster_responsibilities(&vt, w.view()).unwrap();
            for s in row_sums(&q.values).iter() {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            prop_assert!(q.values.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn inverse_min_max_bounded_and_order_preserving(
            vals in proptest::collection::vec(-1e6f64..1e3, 2..40),
            lambda in 1.0f64..100.0,
        ) {
            let n = vals.len();
            let v = LogDensityMatrix { values: Array::from_shape_vec((1, n), vals.clone()).unwrap() };
            let t = inverse_min_max(&v, lambda).unwrap();
            prop_assert!(t.values.iter().all(|&x| (0.0..=lambda).contains(&x)));
            let range = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - vals.iter().cloned().fold(f64::INFINITY, f64::min);
            for i in 0..n {
                for j in 0..n {
                    if vals[i] > vals[j] {
                        // gaps far below the range resolution may collapse to a tie
                        if vals[i] - vals[j] > range * 1e-12 {
                            prop_assert!(t.values[[0, i]] > t.values[[0, j]]);
                        } else {
                            prop_assert!(t.values[[0, i]] >= t.values[[0, j]]);
                        }
                    }
                }
            }
        }

        #[test]
        fn responsibilities_shift_invariant(
            vals in proptest::collection::vec(-500f64..0.0, 8),
            shift in -50f64..50.0,
        ) {
            let v = LogDensityMatrix { values: Array::from_shape_vec((2, 4), vals).unwrap() };
            let vt = inverse_min_max(&v, 50.0).unwrap();
            let shifted = LogDensityMatrix { values: vt.values.mapv(|x| x + shift) };
            let w = array![0.3, 0.7];
            let a = cluster_responsibilities(&vt, w.view()).unwrap();
            let b = cluster_responsibilities(&shifted, w.view()).unwrap();
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn log_density_matches_direct_product(
            d in 1usize..=4,
            c in 1usize..=3,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array2::from_shape_fn((3, d), |_| rng.random_range(-3.0..3.0));
            let mu = Array2::from_shape_fn((c, d), |_| rng.random_range(-3.0..3.0));
            let var = Array2::from_shape_fn((c, d), |_| rng.random_range(0.1..4.0));
            let v = gaussian_log_density(z.view(), mu.view(), var.view()).unwrap();
            for ci in 0..c {
                for l in 0..3 {
                    let direct = direct_log_density(
                        z.row(l).as_slice().unwrap(),
                        mu.row(ci).as_slice().unwrap(),
                        var.row(ci).as_slice().unwrap(),
                    );
                    prop_assert!((v.values[[ci, l]] - direct).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn extreme_latents_stay_finite(
            vals in proptest::collection::vec(-1e3f64..1e3, 8),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array::from_shape_vec((4, 2), vals).unwrap();
            let mu = Array2::from_shape_fn((3, 2), |_| rng.random_range(-5.0..5.0));
            let var = Array2::from_shape_fn((3, 2), |_| rng.random_range(VAR_FLOOR..10.0));
            let v = gaussian_log_density(z.view(), mu.view(), var.view()).unwrap();
            prop_assert!(v.values.iter().all(|x| x.is_finite()));
            let vt = inverse_min_max(&v, 50.0).unwrap();
            let q = cluster_responsibilities(&vt, array![0.2, 0.3, 0.5].view()).unwrap();
            prop_assert!(q.values.iter().all(|x| x.is_finite()));
            let z32 = z.mapv(|x| x as f32);
            let v32 = gaussian_log_density(z32.view(), mu.mapv(|x| x as f32).view(), var.mapv(|x| x as f32).view()).unwrap();
            let vt32 = inverse_min_max(&v32, 50.0f32).unwrap();
            let q32 = cluster_responsibilities(&vt32, array![0.2f32, 0.3, 0.5].view()).unwrap();
            prop_assert!(q32.values.iter().all(|x| x.is_finite()));
        }
    }
}
