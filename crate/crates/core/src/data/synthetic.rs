use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::{Likelihood, SampleShape};

pub const BEHAVIOR_CHANNELS: usize = 8;
pub const BEHAVIOR_STEPS: usize = 30;

/// Concentration of the Dirichlet cluster-size draw.
const SIZE_CONCENTRATION: f64 = 3.0;
/// Shape of the per-sample, per-channel Gamma activity factor (mean 1).
const CHANNEL_NOISE_SHAPE: f64 = 6.0;
/// Shape of the per-entry Gamma noise (mean 1).
const ENTRY_NOISE_SHAPE: f64 = 4.0;
/// Minimum Euclidean distance between archetype log-levels.
const MIN_ARCHETYPE_GAP: f64 = 2.5;

fn dirichlet<R: Rng>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    let draws: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / s).collect()
}

struct Archetype {
    log_level: [f64; BEHAVIOR_CHANNELS],
    amplitude: [f64; BEHAVIOR_CHANNELS],
    phase: [f64; BEHAVIOR_CHANNELS],
    trend: f64,
}

impl Archetype {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let mut a = Archetype {
            log_level: [0.0; BEHAVIOR_CHANNELS],
            amplitude: [0.0; BEHAVIOR_CHANNELS],
            phase: [0.0; BEHAVIOR_CHANNELS],
            trend: rng.random_range(-1.0..1.0),
        };
        for ch in 0..BEHAVIOR_CHANNELS {
            a.log_level[ch] = rng.random_range(0.0f64..3.5);
            a.amplitude[ch] = rng.random_range(0.0..0.8);
            a.phase[ch] = rng.random_range(0.0..std::f64::consts::TAU);
        }
        a
    }

    fn gap(&self, other: &Archetype) -> f64 {
        self.log_level
            .iter()
            .zip(&other.log_level)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Expected count of channel `ch` on day `t`, with a weekly cycle and a trend.
    fn intensity(&self, ch: usize, t: usize) -> f64 {
        let day = t as f64;
        let cycle = 1.0 + self.amplitude[ch] * (std::f64::consts::TAU * day / 7.0 + self.phase[ch]).sin();
        let trend = (self.trend * (day / (BEHAVIOR_STEPS - 1) as f64 - 0.5)).exp();
        self.log_level[ch].exp() * cycle * trend
    }
}

/// Labelled stand-in for daily player-behaviour data: `n` series of
/// 8 channels × 30 days of non-negative counts drawn from `clusters`
/// archetypes with Dirichlet-distributed cluster sizes and multiplicative
/// Gamma noise under Poisson counts. Samples are raw counts in Gaussian mode.
pub fn synthetic_behavior(n: usize, clusters: usize, seed: u64) -> Result<Dataset> {
    if clusters == 0 || n < clusters {
        return Err(Error::InvalidArgument(format!(
            "need n ≥ clusters ≥ 1, got n={n}, clusters={clusters}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut archetypes: Vec<Archetype> = Vec::with_capacity(clusters);
    let mut attempts = 0;
    while archetypes.len() < clusters {
        let cand = Archetype::random(&mut rng);
        attempts += 1;
        if attempts > 10_000 || archetypes.iter().all(|a| a.gap(&cand) >= MIN_ARCHETYPE_GAP) {
            archetypes.push(cand);
        }
    }
    let weights = dirichlet(clusters, SIZE_CONCENTRATION, &mut rng);
    let channel_noise = Gamma::new(CHANNEL_NOISE_SHAPE, 1.0 / CHANNEL_NOISE_SHAPE).expect("valid");
    let entry_noise = Gamma::new(ENTRY_NOISE_SHAPE, 1.0 / ENTRY_NOISE_SHAPE).expect("valid");
    let len = BEHAVIOR_CHANNELS * BEHAVIOR_STEPS;
    let mut samples = Array2::zeros((n, len));
    let mut labels = Vec::with_capacity(n);
    for mut row in samples.outer_iter_mut() {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = clusters - 1;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                c = k;
                break;
            }
        }
        labels.push(c);
        let arch = &archetypes[c];
        for ch in 0..BEHAVIOR_CHANNELS {
            let activity = channel_noise.sample(&mut rng);
            for t in 0..BEHAVIOR_STEPS {
                let rate = arch.intensity(ch, t) * activity * entry_noise.sample(&mut rng);
                let count = if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(&mut rng)
                } else {
                    0.0
                };
                row[ch * BEHAVIOR_STEPS + t] = count as f32;
            }
        }
    }
    Dataset::new(
        samples,
        Some(labels),
        SampleShape {
            channels: BEHAVIOR_CHANNELS,
            height: 1,
            width: BEHAVIOR_STEPS,
        },
        Likelihood::Gaussian,
    )
}

/// Default per-axis standard deviation of each blob.
pub const BLOB_SPREAD: f64 = 0.5;

/// Toy data: `clusters` Gaussian blobs of standard deviation `spread` on a
/// circle of radius 3 in two dimensions, lifted to `dim` features by a fixed
/// random linear map plus small noise.
pub fn synthetic_blobs(n: usize, clusters: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if clusters == 0 || n < clusters || dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "need n ≥ clusters ≥ 1 and dim ≥ 2, got n={n}, clusters={clusters}, dim={dim}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("blob spread must be finite and non-negative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let lift = Array2::from_shape_simple_fn((2, dim), || normal.sample(&mut rng) / std::f64::consts::SQRT_2);
    let mut samples = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in samples.outer_iter_mut().enumerate() {
        let c = i % clusters;
        labels.push(c);
        let angle = std::f64::consts::TAU * c as f64 / clusters as f64;
        let p = [
            3.0 * angle.cos() + spread * normal.sample(&mut rng),
            3.0 * angle.sin() + spread * normal.sample(&mut rng),
        ];
        for j in 0..dim {
            row[j] = (p[0] * lift[[0, j]] + p[1] * lift[[1, j]] + 0.1 * normal.sample(&mut rng)) as f32;
        }
    }
    Dataset::new(
        samples,
        Some(labels),
        SampleShape {
            channels: 1,
            height: 1,
            width: dim,
        },
        Likelihood::Gaussian,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn behaviour_shape_and_determinism() {
        let a = synthetic_behavior(500, 4, 3).unwrap();
        assert_eq!(a.samples.dim(), (500, 240));
        assert_eq!(a.shape, SampleShape { channels: 8, height: 1, width: 30 });
        assert!(a.samples.iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
        assert_eq!(a, synthetic_behavior(500, 4, 3).unwrap());
        assert_ne!(a, synthetic_behavior(500, 4, 4).unwrap());
        let one = synthetic_behavior(50, 1, 0).unwrap();
        assert!(one.labels.unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn proportions_follow_the_dirichlet_draw() {
        let n = 100_000;
        let ds = synthetic_behavior(n, 4, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut arch = Vec::new();
        while arch.len() < 4 {
            let cand = Archetype::random(&mut rng);
            if arch.iter().all(|a: &Archetype| a.gap(&cand) >= MIN_ARCHETYPE_GAP) {
                arch.push(cand);
            }
        }
        let w = dirichlet(4, SIZE_CONCENTRATION, &mut rng);
        let labels = ds.labels.unwrap();
        for (k, wk) in w.iter().enumerate() {
            let p = labels.iter().filter(|&&l| l == k).count() as f64 / n as f64;
            assert!((p - wk).abs() < 0.02, "cluster {k}: {p} vs {wk}");
        }
        assert!(w.iter().any(|&x| (x - 0.25).abs() > 0.02));
    }

    #[test]
    fn blobs_are_balanced() {
        let ds = synthetic_blobs(400, 4, 8, BLOB_SPREAD, 0).unwrap();
        assert_eq!(ds.samples.dim(), (400, 8));
        let labels = ds.labels.unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 3).count(), 100);
    }
}
