use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use super::{glorot, ParamMut, ParamRef};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a strided 2-D convolution with explicit (possibly
/// asymmetric) zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvGeometry {
    /// Output size `ceil(in / stride)` with the padding split low/high.
    pub fn same(in_channels: usize, in_h: usize, in_w: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        let out = in_h.div_ceil(stride);
        let total = ((out - 1) * stride + kernel).saturating_sub(in_h);
        Self {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel,
            stride,
            pad_lo: total / 2,
            pad_hi: total - total / 2,
        }
    }

    pub fn valid(in_channels: usize, in_h: usize, in_w: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel,
            stride,
            pad_lo: 0,
            pad_hi: 0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let fits = |n: usize| n + self.pad_lo + self.pad_hi >= self.kernel;
        if self.stride == 0 || self.kernel == 0 || !fits(self.in_h) || !fits(self.in_w) {
            return Err(Error::InvalidArgument(format!(
                "convolution geometry does not fit: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + self.pad_lo + self.pad_hi - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + self.pad_lo + self.pad_hi - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds one image into a `(C·k·k) × (out_h·out_w)` patch matrix.
    fn im2col<T: Scalar>(&self, image: &[T]) -> Array2<T> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let mut cols = Array2::zeros((self.patch_len(), oh * ow));
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad_lo as isize;
                        if ii < 0 || ii >= self.in_h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad_lo as isize;
                            if jj < 0 || jj >= self.in_w as isize {
                                continue;
                            }
                            cols[[row, oi * ow + oj]] =
                                image[(c * self.in_h + ii as usize) * self.in_w + jj as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): folds patches back, summing overlaps.
    fn col2im<T: Scalar>(&self, cols: ArrayView2<T>, image: &mut [T]) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad_lo as isize;
                        if ii < 0 || ii >= self.in_h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad_lo as isize;
                            if jj < 0 || jj >= self.in_w as isize {
                                continue;
                            }
                            image[(c * self.in_h + ii as usize) * self.in_w + jj as usize] +=
                                cols[[row, oi * ow + oj]];
                        }
                    }
                }
            }
        }
    }
}

/// Strided convolution; weight stored as `out_channels × (in_channels·k·k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub geometry: ConvGeometry,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    grad_weight: Array2<T>,
    grad_bias: Array1<T>,
    cols: Vec<Array2<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, geometry: ConvGeometry) -> Result<Self> {
        geometry.check()?;
        let k2 = geometry.kernel * geometry.kernel;
        let shape = (geometry.out_channels, geometry.patch_len());
        Ok(Self {
            geometry,
            weight: glorot(rng, geometry.in_channels * k2, geometry.out_channels * k2, shape),
            bias: Array1::zeros(geometry.out_channels),
            grad_weight: Array2::zeros(shape),
            grad_bias: Array1::zeros(geometry.out_channels),
            cols: Vec::new(),
        })
    }

    fn apply(&self, cols: &Array2<T>, out: &mut [T]) {
        let y = self.weight.dot(cols);
        let spatial = y.ncols();
        for (o, row) in y.outer_iter().enumerate() {
            let b = self.bias[o];
            for (s, v) in row.iter().enumerate() {
                out[o * spatial + s] = *v + b;
            }
        }
    }

    pub(crate) fn forward(&mut self, x: Array2<T>) -> Array2<T> {
        let g = self.geometry;
        let mut out = Array2::zeros((x.nrows(), g.out_len()));
        self.cols.clear();
        for (row, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            let cols = g.im2col(row.as_slice().expect("contiguous"));
            self.apply(&cols, dst.as_slice_mut().expect("contiguous"));
            self.cols.push(cols);
        }
        out
    }

    pub(crate) fn infer(&self, x: &Array2<T>) -> Array2<T> {
        let g = self.geometry;
        let mut out = Array2::zeros((x.nrows(), g.out_len()));
        for (row, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            let cols = g.im2col(row.as_slice().expect("contiguous"));
            self.apply(&cols, dst.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub(crate) fn backward(&mut self, grad: &Array2<T>) -> Array2<T> {
        let g = self.geometry;
        let spatial = g.out_h() * g.out_w();
        let mut dx = Array2::zeros((grad.nrows(), g.in_len()));
        for (i, (gout, mut dst)) in grad.outer_iter().zip(dx.outer_iter_mut()).enumerate() {
            let gout = gout
                .to_owned()
                .into_shape_with_order((g.out_channels, spatial))
                .expect("output layout");
            let cols = &self.cols[i];
            self.grad_weight += &gout.dot(&cols.t());
            for (o, row) in gout.outer_iter().enumerate() {
                self.grad_bias[o] += row.sum();
            }
            let dcols = self.weight.t().dot(&gout);
            g.col2im(dcols.view(), dst.as_slice_mut().expect("contiguous"));
        }
        dx
    }

    pub(crate) fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut {
            name: format!("{prefix}.weight"),
            value: self.weight.as_slice_mut().expect("contiguous"),
            grad: self.grad_weight.as_slice_mut().expect("contiguous"),
        });
        out.push(ParamMut {
            name: format!("{prefix}.bias"),
            value: self.bias.as_slice_mut().expect("contiguous"),
            grad: self.grad_bias.as_slice_mut().expect("contiguous"),
        });
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: format!("{prefix}.weight"),
            value: self.weight.as_slice().expect("contiguous"),
        });
        out.push(ParamRef {
            name: format!("{prefix}.bias"),
            value: self.bias.as_slice().expect("contiguous"),
        });
    }
}

/// Transposed convolution, defined as the adjoint of the convolution
/// `adjoint_of` that maps this layer's output shape back to its input shape.
/// Weight stored as `adjoint_of.out_channels × (adjoint_of.in_channels·k·k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub adjoint_of: ConvGeometry,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    grad_weight: Array2<T>,
    grad_bias: Array1<T>,
    inputs: Option<Array2<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, adjoint_of: ConvGeometry) -> Result<Self> {
        adjoint_of.check()?;
        let k2 = adjoint_of.kernel * adjoint_of.kernel;
        let shape = (adjoint_of.out_channels, adjoint_of.patch_len());
        Ok(Self {
            adjoint_of,
            weight: glorot(rng, adjoint_of.out_channels * k2, adjoint_of.in_channels * k2, shape),
            bias: Array1::zeros(adjoint_of.in_channels),
            grad_weight: Array2::zeros(shape),
            grad_bias: Array1::zeros(adjoint_of.in_channels),
            inputs: None,
        })
    }

    pub fn in_len(&self) -> usize {
        self.adjoint_of.out_len()
    }

    pub fn out_len(&self) -> usize {
        self.adjoint_of.in_len()
    }

    pub(crate) fn forward(&mut self, x: Array2<T>) -> Array2<T> {
        let y = self.infer(&x);
        self.inputs = Some(x);
        y
    }

    pub(crate) fn infer(&self, x: &Array2<T>) -> Array2<T> {
        let g = self.adjoint_of;
        let spatial_in = g.out_h() * g.out_w();
        let plane = g.in_h * g.in_w;
        let mut out = Array2::zeros((x.nrows(), g.in_len()));
        for (row, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            let xs = row
                .to_owned()
                .into_shape_with_order((g.out_channels, spatial_in))
                .expect("input layout");
            let cols = self.weight.t().dot(&xs);
            let dst = dst.as_slice_mut().expect("contiguous");
            g.col2im(cols.view(), dst);
            for c in 0..g.in_channels {
                let b = self.bias[c];
                dst[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    pub(crate) fn backward(&mut self, grad: &Array2<T>) -> Array2<T> {
        let g = self.adjoint_of;
        let spatial_in = g.out_h() * g.out_w();
        let plane = g.in_h * g.in_w;
        let inputs = self.inputs.as_ref().expect("transposed conv backward before forward");
        let mut dx = Array2::zeros((grad.nrows(), g.out_len()));
        for ((gout, xs), mut dst) in grad.outer_iter().zip(inputs.outer_iter()).zip(dx.outer_iter_mut()) {
            let gslice = gout.as_slice().expect("contiguous");
            for c in 0..g.in_channels {
                self.grad_bias[c] += gslice[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
            }
            let gcols = g.im2col(gslice);
            let xs = xs
                .to_owned()
                .into_shape_with_order((g.out_channels, spatial_in))
                .expect("input layout");
            self.grad_weight += &xs.dot(&gcols.t());
            let d = self.weight.dot(&gcols);
            dst.as_slice_mut()
                .expect("contiguous")
                .copy_from_slice(d.as_slice().expect("contiguous"));
        }
        dx
    }

    pub(crate) fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut {
            name: format!("{prefix}.weight"),
            value: self.weight.as_slice_mut().expect("contiguous"),
            grad: self.grad_weight.as_slice_mut().expect("contiguous"),
        });
        out.push(ParamMut {
            name: format!("{prefix}.bias"),
            value: self.bias.as_slice_mut().expect("contiguous"),
            grad: self.grad_bias.as_slice_mut().expect("contiguous"),
        });
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: format!("{prefix}.weight"),
            value: self.weight.as_slice().expect("contiguous"),
        });
        out.push(ParamRef {
            name: format!("{prefix}.bias"),
            value: self.bias.as_slice().expect("contiguous"),
        });
    }
}
