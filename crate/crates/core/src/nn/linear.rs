use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{glorot, ParamMut, ParamRef};
use crate::scalar::Scalar;

/// Affine layer `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    grad_weight: Array2<T>,
    grad_bias: Array1<T>,
    input: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: glorot(rng, inputs, outputs, (inputs, outputs)),
            bias: Array1::zeros(outputs),
            grad_weight: Array2::zeros((inputs, outputs)),
            grad_bias: Array1::zeros(outputs),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub(crate) fn forward(&mut self, x: Array2<T>) -> Array2<T> {
        let y = self.infer(&x);
        self.input = Some(x);
        y
    }

    pub(crate) fn infer(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    pub(crate) fn backward(&mut self, grad: &Array2<T>) -> Array2<T> {
        let x = self.input.as_ref().expect("linear backward before forward");
        self.grad_weight += &x.t().dot(grad);
        self.grad_bias += &grad.sum_axis(Axis(0));
        grad.dot(&self.weight.t())
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
