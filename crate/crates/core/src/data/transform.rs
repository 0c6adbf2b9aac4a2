use ndarray::{Array2, ArrayView2, Axis};

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::SampleShape;

pub fn log1p(ds: &mut Dataset) {
    ds.samples.mapv_inplace(f32::ln_1p);
}

/// Zero mean, unit variance per feature column.
pub fn standardize(ds: &mut Dataset) {
    let n = ds.samples.nrows().max(1) as f64;
    for mut col in ds.samples.columns_mut() {
        let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = col.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
        col.mapv_inplace(|v| ((v as f64 - mean) / sd) as f32);
    }
}

/// Subtracts each channel's mean over all samples and positions.
pub fn zero_center_channels(ds: &mut Dataset) {
    let per = ds.shape.height * ds.shape.width;
    for ch in 0..ds.shape.channels {
        let mut block = ds.samples.slice_mut(ndarray::s![.., ch * per..(ch + 1) * per]);
        let mean = block.iter().map(|&v| v as f64).sum::<f64>() / block.len().max(1) as f64;
        block.mapv_inplace(|v| (v as f64 - mean) as f32);
    }
}

/// Bilinear resampling with half-pixel centres.
pub fn resize_bilinear(img: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = img.dim();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        let x = ((o as f32 + 0.5) * inp as f32 / out as f32 - 0.5).max(0.0);
        let lo = (x.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, x - lo as f32)
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = coord(i, out_h, in_h);
        let (x0, x1, fx) = coord(j, out_w, in_w);
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Places every channel's series on a square (zero-padded to the next
/// perfect square) and resizes it to `height × width`.
pub fn to_grid(ds: &Dataset, height: usize, width: usize) -> Result<Dataset> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
    }
    let per = ds.shape.height * ds.shape.width;
    let side = (per as f64).sqrt().ceil() as usize;
    let channels = ds.shape.channels;
    let out_len = channels * height * width;
    let mut out = Array2::zeros((ds.len(), out_len));
    for (row, mut dst) in ds.samples.outer_iter().zip(out.outer_iter_mut()) {
        for ch in 0..channels {
            let mut square = Array2::zeros((side, side));
            for (k, &v) in row.slice(ndarray::s![ch * per..(ch + 1) * per]).iter().enumerate() {
                square[[k / side, k % side]] = v;
            }
            let resized = resize_bilinear(square.view(), height, width);
            dst.slice_mut(ndarray::s![ch * height * width..(ch + 1) * height * width])
                .assign(&resized.into_shape_with_order(height * width).expect("contiguous"));
        }
    }
    Dataset::new(
        out,
        ds.labels.clone(),
        SampleShape {
            channels,
            height,
            width,
        },
        ds.mode,
    )
}

/// Per-sample mean of every channel, `N × channels`.
pub fn channel_means(ds: &Dataset) -> Array2<f32> {
    let per = ds.shape.height * ds.shape.width;
    let mut out = Array2::zeros((ds.len(), ds.shape.channels));
    for ch in 0..ds.shape.channels {
        let block = ds.samples.slice(ndarray::s![.., ch * per..(ch + 1) * per]);
        out.column_mut(ch).assign(&block.mean_axis(Axis(1)).expect("non-empty channel"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Likelihood;
    use ndarray::array;

    fn series() -> Dataset {
        Dataset::new(
            Array2::from_shape_fn((4, 2 * 7), |(i, j)| (i + j) as f32),
            None,
            SampleShape {
                channels: 2,
                height: 1,
                width: 7,
            },
            Likelihood::Gaussian,
        )
        .unwrap()
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = array![[1.0f32, 2.0], [3.0, 4.0]];
        assert_eq!(resize_bilinear(img.view(), 2, 2), img);
        let flat = Array2::from_elem((3, 5), 0.7f32);
        assert!(resize_bilinear(flat.view(), 8, 6).iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let up = resize_bilinear(array![[0.0f32, 1.0]].view(), 1, 4);
        assert_eq!(up.row(0).to_vec(), vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn zero_centering_per_channel() {
        let mut ds = series();
        zero_center_channels(&mut ds);
        for ch in 0..2 {
            let block = ds.samples.slice(ndarray::s![.., ch * 7..(ch + 1) * 7]);
            assert!(block.sum().abs() < 1e-4);
        }
    }

    #[test]
    fn grid_layout() {
        let ds = series();
        let g = to_grid(&ds, 3, 3).unwrap();
        assert_eq!(g.shape, SampleShape { channels: 2, height: 3, width: 3 });
        assert_eq!(g.samples.dim(), (4, 18));
        // 7 steps pad to a 3×3 square, which needs no resampling
        assert_eq!(g.samples[[0, 0]], 0.0);
        assert_eq!(g.samples[[0, 6]], 6.0);
        assert_eq!(g.samples[[0, 8]], 0.0);
        assert_eq!(g.samples[[1, 9]], 8.0);
    }

    #[test]
    fn standardize_moments() {
        let mut ds = series();
        standardize(&mut ds);
        let m = ds.samples.mean_axis(Axis(0)).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-5));
        assert_eq!(channel_means(&ds).dim(), (4, 2));
    }
}
