//! Mixture-prior initialization: embed a seeded subsample with the encoder
//! and fit a diagonal-covariance Gaussian mixture to it by EM.

use log::{debug, warn};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};
use crate::mixture::{log_density_kernel, MixturePrior, VAR_FLOOR, WEIGHT_FLOOR};
use crate::model::VadeModel;
use crate::scalar::Scalar;

pub const DEFAULT_MAX_EM_STEPS: usize = 10_000;
pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-3;
/// Collapsed components may be reseeded at most this many times per fit.
pub const MAX_RESEEDS: usize = 10;
const ENCODE_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFitConfig {
    pub components: usize,
    pub max_em_steps: usize,
    pub convergence_tol: f64,
    pub subsample_size: usize,
    pub seed: u64,
}

impl GmmFitConfig {
    pub fn new(components: usize, subsample_size: usize, seed: u64) -> Self {
        Self {
            components,
            max_em_steps: DEFAULT_MAX_EM_STEPS,
            convergence_tol: DEFAULT_CONVERGENCE_TOL,
            subsample_size,
            seed,
        }
    }

    pub fn issues(&self, latent_dim: usize) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.components == 0 {
            out.push(ConfigIssue::new("model.clusters", "must be at least 1"));
        }
        if self.max_em_steps == 0 {
            out.push(ConfigIssue::new("gmm.max_em_steps", "must be positive"));
        }
        if !(self.convergence_tol > 0.0) {
            out.push(ConfigIssue::new("gmm.tol", "must be positive"));
        }
        if self.subsample_size < self.components * latent_dim {
            out.push(ConfigIssue::new(
                "gmm.k",
                format!(
                    "k × batch_size = {} must be at least clusters × latent_dim = {}",
                    self.subsample_size,
                    self.components * latent_dim
                ),
            ));
        }
        out
    }
}

/// Posterior means of a seeded uniform subsample, drawn without
/// replacement. A request larger than the dataset is clamped.
pub fn collect_latents<T: Scalar>(
    model: &VadeModel<T>,
    data: ArrayView2<f32>,
    subsample_size: usize,
    seed: u64,
) -> Array2<f64> {
    let n = data.nrows();
    let amount = if subsample_size > n {
        warn!("GMM subsample of {subsample_size} rows requested from {n}; using all rows");
        n
    } else {
        subsample_size
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = index::sample(&mut rng, n, amount).into_vec();
    let mut out = Array2::zeros((amount, model.latent_dim()));
    for (chunk_no, chunk) in rows.chunks(ENCODE_CHUNK).enumerate() {
        let batch = data.select(Axis(0), chunk);
        let z = model.encode_means(batch.view());
        let start = chunk_no * ENCODE_CHUNK;
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&z);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub prior: MixturePrior,
    /// Mean log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: usize,
    /// Indices into `log_likelihood` at which a reseed restarted the ascent.
    pub reseed_at: Vec<usize>,
}

struct Params {
    log_w: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
}

/// k-means++ seeding: the first centre uniformly, each further centre with
/// probability proportional to the squared distance to its nearest centre.
fn seed_means<R: Rng>(z: ArrayView2<f64>, c: usize, rng: &mut R) -> Array2<f64> {
    let n = z.nrows();
    let mut means = Array2::zeros((c, z.ncols()));
    let first = rng.random_range(0..n);
    means.row_mut(0).assign(&z.row(first));
    let sq = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut nearest: Vec<f64> = z.outer_iter().map(|r| sq(r, means.row(0))).collect();
    for k in 1..c {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        means.row_mut(k).assign(&z.row(pick));
        for (i, r) in z.outer_iter().enumerate() {
            nearest[i] = nearest[i].min(sq(r, means.row(k)));
        }
    }
    means
}

fn column_variance(z: ArrayView2<f64>) -> Array1<f64> {
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    let mut var = Array1::zeros(z.ncols());
    for r in z.outer_iter() {
        var += &(&r - &mean).mapv(|v| v * v);
    }
    (var / z.nrows() as f64).mapv(|v| v.max(VAR_FLOOR))
}

/// E-step: responsibilities (`N × C`) and mean log-likelihood.
fn e_step(z: ArrayView2<f64>, p: &Params) -> (Array2<f64>, f64) {
    let inv_var = p.variances.mapv(|v| 1.0 / v);
    let log_var = p.variances.mapv(f64::ln);
    let dens = log_density_kernel(z, p.means.view(), inv_var.view(), log_var.view());
    let (c, n) = dens.dim();
    let mut resp = Array2::zeros((n, c));
    let mut ll = 0.0;
    for l in 0..n {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(p.log_w[k] + dens[[k, l]]);
        }
        let mut s = 0.0;
        for k in 0..c {
            let e = (p.log_w[k] + dens[[k, l]] - m).exp();
            resp[[l, k]] = e;
            s += e;
        }
        resp.row_mut(l).mapv_inplace(|e| e / s);
        ll += m + s.ln();
    }
    (resp, ll / n as f64)
}

/// M-step; returns the components whose weight fell below the floor.
fn m_step(z: ArrayView2<f64>, resp: &Array2<f64>, p: &mut Params) -> Vec<usize> {
    let n = z.nrows() as f64;
    let nk = resp.sum_axis(Axis(0));
    let mut collapsed = Vec::new();
    for k in 0..nk.len() {
        let w = nk[k] / n;
        if !(w >= WEIGHT_FLOOR) || nk[k] <= 0.0 {
            collapsed.push(k);
            continue;
        }
        p.log_w[k] = w.ln();
        let rk = resp.column(k);
        let mean = z.t().dot(&rk) / nk[k];
        let mut var = Array1::<f64>::zeros(z.ncols());
        for (row, &r) in z.outer_iter().zip(rk) {
            for j in 0..row.len() {
                let d = row[j] - mean[j];
                var[j] += r * d * d;
            }
        }
        p.means.row_mut(k).assign(&mean);
        p.variances
            .row_mut(k)
            .assign(&(var / nk[k]).mapv(|v| v.max(VAR_FLOOR)));
    }
    collapsed
}

/// Diagonal-covariance EM on the rows of `z`.
pub fn fit_gmm(z: ArrayView2<f64>, config: &GmmFitConfig) -> Result<GmmFit> {
    let (n, d) = z.dim();
    let c = config.components;
    if c == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("need components ≥ 1 and d ≥ 1, got C={c}, d={d}")));
    }
    if n < c * d || n < c {
        return Err(Error::InvalidArgument(format!(
            "{n} samples are too few for {c} components in {d} dimensions"
        )));
    }
    if let Some(row) = z.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLatent { row });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let global_var = column_variance(z);
    let mut p = Params {
        log_w: Array1::from_elem(c, -(c as f64).ln()),
        means: seed_means(z, c, &mut rng),
        variances: Array2::from_shape_fn((c, d), |(_, j)| global_var[j]),
    };
    let mut trace = Vec::new();
    let mut reseeds = 0;
    let mut reseed_at = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_em_steps {
        iterations += 1;
        let (resp, ll) = e_step(z, &p);
        if let Some(&prev) = trace.last() {
            let restarted = reseed_at.last() == Some(&trace.len());
            debug_assert!(
                restarted || ll >= prev - 1e-8,
                "EM log-likelihood decreased from {prev} to {ll} at iteration {iterations}"
            );
            if !restarted && ll - prev < config.convergence_tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        let collapsed = m_step(z, &resp, &mut p);
        if !collapsed.is_empty() {
            for k in collapsed {
                reseeds += 1;
                if reseeds > MAX_RESEEDS {
                    return Err(Error::GmmInit(format!(
                        "components kept collapsing below weight {WEIGHT_FLOOR} after {MAX_RESEEDS} reseeds"
                    )));
                }
                let at = rng.random_range(0..n);
                warn!("GMM component {k} collapsed; reseeding at sample {at}");
                p.means.row_mut(k).assign(&z.row(at));
                p.variances.row_mut(k).assign(&global_var);
                p.log_w[k] = -(c as f64).ln();
            }
            let lse = crate::mixture::log_sum_exp(p.log_w.iter().copied());
            p.log_w.mapv_inplace(|v| v - lse);
            reseed_at.push(trace.len());
        }
    }
    debug!("GMM fit: {iterations} iterations, converged={converged}, final mean ll={:?}", trace.last());
    let prior = MixturePrior::floored(p.log_w.mapv(f64::exp), p.means, p.variances)?;
    Ok(GmmFit {
        prior,
        log_likelihood: trace,
        iterations,
        converged,
        reseeds,
        reseed_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn two_blobs(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(-5.0, 0.1f64.sqrt()).unwrap();
        let b = Normal::new(5.0, 0.1f64.sqrt()).unwrap();
        Array2::from_shape_fn((n, 1), |(i, _)| if i % 2 == 0 { a.sample(&mut rng) } else { b.sample(&mut rng) })
    }

    #[test]
    fn recovers_separated_components() {
        let z = two_blobs(2000, 1);
        let fit = fit_gmm(z.view(), &GmmFitConfig::new(2, 2000, 7)).unwrap();
        let mut pairs: Vec<(f64, f64)> = (0..2).map(|k| (fit.prior.means()[[k, 0]], fit.prior.weights()[k])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((pairs[0].0 + 5.0).abs() < 0.2 && (pairs[1].0 - 5.0).abs() < 0.2, "{pairs:?}");
        assert!(pairs.iter().all(|p| (p.1 - 0.5).abs() < 0.05));
        assert!(fit.converged);
    }

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(2.0, 3.0).unwrap();
        let z = Array2::from_shape_simple_fn((500, 3), || n.sample(&mut rng));
        let fit = fit_gmm(z.view(), &GmmFitConfig::new(1, 500, 0)).unwrap();
        assert_eq!(fit.prior.weights()[0], 1.0);
        let mean = z.mean_axis(Axis(0)).unwrap();
        let var = z.var_axis(Axis(0), 0.0);
        for j in 0..3 {
            assert!((fit.prior.means()[[0, j]] - mean[j]).abs() < 1e-10);
            assert!((fit.prior.variances()[[0, j]] - var[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn row_permutation_gives_same_fit_up_to_labels() {
        let z = two_blobs(1000, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let perm = index::sample(&mut rng, 1000, 1000).into_vec();
        let zp = z.select(Axis(0), &perm);
        let a = fit_gmm(z.view(), &GmmFitConfig::new(2, 1000, 11)).unwrap();
        let b = fit_gmm(zp.view(), &GmmFitConfig::new(2, 1000, 11)).unwrap();
        let sorted = |f: &GmmFit| {
            let mut m: Vec<f64> = f.prior.means().column(0).to_vec();
            m.sort_by(f64::total_cmp);
            m
        };
        for (x, y) in sorted(&a).iter().zip(sorted(&b)) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn log_likelihood_is_monotone() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, 1.0).unwrap();
            let z = Array2::from_shape_simple_fn((300, 2), || n.sample(&mut rng));
            let mut cfg = GmmFitConfig::new(4, 300, seed);
            cfg.convergence_tol = 1e-9;
            let fit = fit_gmm(z.view(), &cfg).unwrap();
            for (i, w) in fit.log_likelihood.windows(2).enumerate() {
                if !fit.reseed_at.contains(&(i + 1)) {
                    assert!(w[1] >= w[0] - 1e-8, "seed {seed} step {i}: {} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let z = Array2::from_elem((3, 2), 1.0);
        assert!(fit_gmm(z.view(), &GmmFitConfig::new(2, 3, 0)).is_err());
        let mut z = two_blobs(10, 0);
        z[[4, 0]] = f64::NAN;
        assert!(matches!(
            fit_gmm(z.view(), &GmmFitConfig::new(2, 10, 0)),
            Err(Error::NonFiniteLatent { row: 4 })
        ));
    }

    #[test]
    fn config_checks_subsample_size() {
        let cfg = GmmFitConfig::new(10, 50, 0);
        assert_eq!(cfg.issues(10).len(), 1);
        assert!(GmmFitConfig::new(10, 25_600, 0).issues(10).is_empty());
        assert_eq!(200 * 128, 25_600);
    }
}
