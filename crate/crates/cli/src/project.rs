//! Two-dimensional projection of embeddings and a scatter-plot renderer.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};

/// Principal-component projection onto the top two axes. Each axis is
/// oriented so its largest-magnitude loading is positive, which makes the
/// output deterministic. One-dimensional inputs get a zero second column.
pub fn pca_2d(points: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, d) = points.dim();
    ensure!(n > 0 && d > 0, "cannot project an empty embedding");
    let mean = points.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centred = &points - &mean;
    let x = DMatrix::from_row_iterator(n, d, centred.iter().copied());
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = Array2::zeros((n, 2));
    for (k, &axis) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(axis).clone_owned();
        let pivot = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        let proj = &x * v;
        for i in 0..n {
            out[[i, k]] = proj[i];
        }
    }
    Ok(out)
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Renders a square scatter plot, one colour per cluster id.
pub fn scatter_png(points: ArrayView2<f64>, clusters: &[usize], size: u32, path: &Path) -> Result<()> {
    ensure!(points.ncols() == 2, "scatter plot needs 2-D points");
    ensure!(points.nrows() == clusters.len(), "one cluster id per point");
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let bounds = |k: usize| {
        let col = points.column(k);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let ((x0, xr), (y0, yr)) = (bounds(0), bounds(1));
    let margin = 8.0;
    let span = size as f64 - 2.0 * margin - 1.0;
    for (p, &c) in points.outer_iter().zip(clusters) {
        let px = (margin + (p[0] - x0) / xr * span).round() as i64;
        let py = (margin + (1.0 - (p[1] - y0) / yr) * span).round() as i64;
        let colour = Rgb(PALETTE[c % PALETTE.len()]);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                    img.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand::Rng;
    use vdc_core::metrics::silhouette;

    #[test]
    fn projection_keeps_separated_clusters_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let points = Array2::from_shape_fn((400, 6), |(i, j)| {
            let centre = if labels[i] == 0 { 0.0 } else { 4.0 };
            (if j < 3 { centre } else { 0.0 }) + rng.random_range(-0.5..0.5)
        });
        let p = pca_2d(points.view()).unwrap();
        assert!(silhouette(p.view(), &labels, 10_000, 0).unwrap() >= 0.5);
        assert_eq!(p, pca_2d(points.view()).unwrap());
    }

    #[test]
    fn leading_axis_carries_most_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points = Array2::from_shape_fn((500, 3), |(_, j)| rng.random_range(-1.0..1.0) * [5.0, 1.0, 0.1][j]);
        let p = pca_2d(points.view()).unwrap();
        let var = |k: usize| p.column(k).mapv(|v| v * v).sum();
        assert!(var(0) > 10.0 * var(1));
    }

    #[test]
    fn scatter_plot_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let pts = ndarray::array![[0.0, 0.0], [1.0, 1.0], [0.5, 0.2]];
        scatter_png(pts.view(), &[0, 1, 2], 64, &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 64);
    }
}
