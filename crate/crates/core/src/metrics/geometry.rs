use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Silhouette scores use at most this many (seeded) samples.
pub const SILHOUETTE_SAMPLE_CAP: usize = 10_000;
/// Reported when the within-cluster scatter vanishes.
pub const CH_SENTINEL: f64 = 1e300;

fn occupied_clusters(pred: &[usize]) -> Vec<usize> {
    let k = pred.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &p in pred {
        sizes[p] += 1;
    }
    sizes
}

fn check(embeddings: ArrayView2<f64>, pred: &[usize], metric: &str) -> Result<Vec<usize>> {
    if embeddings.nrows() != pred.len() {
        return Err(shape_err(format!("{} embeddings for {} predictions", embeddings.nrows(), pred.len())));
    }
    let sizes = occupied_clusters(pred);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::UndefinedMetric(format!("{metric} needs at least two occupied clusters")));
    }
    Ok(sizes)
}

/// Mean silhouette with Euclidean distances. Samples in singleton clusters
/// score 0. Inputs larger than `cap` are scored on a seeded subsample.
pub fn silhouette(embeddings: ArrayView2<f64>, pred: &[usize], cap: usize, seed: u64) -> Result<f64> {
    check(embeddings, pred, "silhouette")?;
    let (points, labels) = if pred.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = index::sample(&mut rng, pred.len(), cap).into_vec();
        rows.sort_unstable();
        let labels: Vec<usize> = rows.iter().map(|&r| pred[r]).collect();
        (embeddings.select(Axis(0), &rows), labels)
    } else {
        (embeddings.to_owned(), pred.to_vec())
    };
    let values = silhouette_samples(points.view(), &labels)?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-sample silhouette `(b − a) / max(a, b)` over all rows, 0 for members
/// of singleton clusters.
pub fn silhouette_samples(points: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    let sizes = check(points, labels, "silhouette")?;
    let k = sizes.len();
    let n = labels.len();
    let mut out = vec![0.0; n];
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let pi = points.row(i);
        for j in 0..n {
            let d: f64 = pi
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            sums[labels[j]] += d;
        }
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        out[i] = if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalinskiHarabasz {
    pub score: f64,
    /// Set when the within-cluster scatter is zero and `score` is the sentinel.
    pub degenerate: bool,
}

/// `[tr(B) / (C − 1)] / [tr(W) / (n − C)]` over occupied clusters.
pub fn calinski_harabasz(embeddings: ArrayView2<f64>, pred: &[usize]) -> Result<CalinskiHarabasz> {
    let sizes = check(embeddings, pred, "Calinski-Harabasz")?;
    let d = embeddings.ncols();
    let k = sizes.len();
    let mut centroids = Array2::<f64>::zeros((k, d));
    for (row, &p) in embeddings.outer_iter().zip(pred) {
        let mut c = centroids.row_mut(p);
        c += &row;
    }
    for (c, &s) in sizes.iter().enumerate() {
        if s > 0 {
            centroids.row_mut(c).mapv_inplace(|v| v / s as f64);
        }
    }
    let overall: Array1<f64> = embeddings.mean_axis(Axis(0)).expect("non-empty");
    let mut between = 0.0;
    for (c, &s) in sizes.iter().enumerate() {
        if s > 0 {
            between += s as f64 * (&centroids.row(c) - &overall).mapv(|v| v * v).sum();
        }
    }
    let mut within = 0.0;
    for (row, &p) in embeddings.outer_iter().zip(pred) {
        within += (&row - &centroids.row(p)).mapv(|v| v * v).sum();
    }
    let c = sizes.iter().filter(|&&s| s > 0).count() as f64;
    let n = pred.len() as f64;
    if within <= 0.0 || n <= c {
        return Ok(CalinskiHarabasz {
            score: CH_SENTINEL,
            degenerate: true,
        });
    }
    Ok(CalinskiHarabasz {
        score: (between / (c - 1.0)) / (within / (n - c)),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn two_blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, _)| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let centre = if labels[i] == 0 { -50.0 } else { 50.0 };
            centre + 0.1 * noise
        });
        (x, labels)
    }

    #[test]
    fn silhouette_examples() {
        let (x, labels) = two_blobs(200, 1);
        assert!(silhouette(x.view(), &labels, SILHOUETTE_SAMPLE_CAP, 0).unwrap() >= 0.9);
        let half: Vec<usize> = (0..200).map(|i| (i / 2) % 2).collect();
        assert!(silhouette(x.view(), &half, SILHOUETTE_SAMPLE_CAP, 0).unwrap() < 0.1);
        let points = ndarray::array![[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]];
        assert_eq!(silhouette(points.view(), &[0, 0, 1, 1], 10, 0).unwrap(), 1.0);
        assert!(matches!(
            silhouette(points.view(), &[1, 1, 1, 1], 10, 0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn swapped_points_score_near_minus_one() {
        let (x, labels) = two_blobs(200, 2);
        let mut swapped = labels.clone();
        for l in swapped.iter_mut().take(6) {
            *l = 1 - *l;
        }
        let per = silhouette_samples(x.view(), &swapped).unwrap();
        assert!(per[..6].iter().all(|&s| s <= -0.9), "{:?}", &per[..6]);
        assert!(per[6..].iter().all(|&s| s >= 0.9));
        let s_proper = silhouette(x.view(), &labels, SILHOUETTE_SAMPLE_CAP, 0).unwrap();
        let renamed: Vec<usize> = labels.iter().map(|&p| 1 - p).collect();
        assert!((silhouette(x.view(), &renamed, SILHOUETTE_SAMPLE_CAP, 0).unwrap() - s_proper).abs() < 1e-12);
    }

    #[test]
    fn ch_examples() {
        let (x, labels) = two_blobs(400, 3);
        let good = calinski_harabasz(x.view(), &labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut rng);
        assert!(calinski_harabasz(x.view(), &shuffled).unwrap().score < good.score);
        assert!(!good.degenerate);

        let points = ndarray::array![[0.0], [0.0], [1.0], [1.0]];
        let ch = calinski_harabasz(points.view(), &[0, 0, 1, 1]).unwrap();
        assert!(ch.degenerate && ch.score == CH_SENTINEL);
        assert!(calinski_harabasz(points.view(), &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn ch_random_assignment_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_simple_fn((10_000, 3), || StandardNormal.sample(&mut rng));
        let pred: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..4)).collect();
        let s = calinski_harabasz(x.view(), &pred).unwrap().score;
        assert!((0.5..=2.0).contains(&s), "{s}");
    }

    #[test]
    fn silhouette_subsample_is_seeded() {
        let (x, labels) = two_blobs(300, 6);
        let a = silhouette(x.view(), &labels, 100, 9).unwrap();
        assert_eq!(a, silhouette(x.view(), &labels, 100, 9).unwrap());
        assert!(a >= 0.9);
    }

    proptest! {
        #[test]
        fn ranges_hold(seed in any::<u64>(), n in 4usize..40, k in 2usize..5, d in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
            let mut pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            pred[0] = 0;
            pred[1] = 1;
            let s = silhouette(x.view(), &pred, SILHOUETTE_SAMPLE_CAP, 0).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!(calinski_harabasz(x.view(), &pred).unwrap().score >= 0.0);
        }
    }
}
