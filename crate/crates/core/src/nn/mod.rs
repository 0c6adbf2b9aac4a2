//! Minimal feed-forward networks with hand-written backpropagation.
//!
//! Layers operate on row-major batches (`L × features`); convolutional
//! layers interpret each row as a flattened `channels × height × width`
//! image.

mod adam;
mod conv;
mod linear;

pub use adam::Adam;
pub use conv::{Conv2d, ConvGeometry, ConvTranspose2d};
pub use linear::Linear;

use ndarray::Array2;
use rand::Rng;

use crate::scalar::Scalar;

/// Mutable view of one parameter tensor and its gradient accumulator.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

/// Read-only view used for serialization.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub value: &'a [T],
}

#[derive(Debug, Clone)]
pub struct Relu<T> {
    mask: Option<Array2<bool>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for Relu<T> {
    fn default() -> Self {
        Self {
            mask: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Relu<T> {
    fn forward(&mut self, x: Array2<T>) -> Array2<T> {
        self.mask = Some(x.mapv(|v| v > T::zero()));
        self.infer(x)
    }

    fn infer(&self, mut x: Array2<T>) -> Array2<T> {
        x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        x
    }

    fn backward(&mut self, mut grad: Array2<T>) -> Array2<T> {
        let mask = self.mask.as_ref().expect("relu backward before forward");
        ndarray::Zip::from(&mut grad).and(mask).for_each(|g, &m| {
            if !m {
                *g = T::zero();
            }
        });
        grad
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Linear(Linear<T>),
    Relu(Relu<T>),
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn relu() -> Self {
        Layer::Relu(Relu::default())
    }

    fn forward(&mut self, x: Array2<T>) -> Array2<T> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Relu(r) => r.forward(x),
            Layer::Conv(c) => c.forward(x),
            Layer::ConvTranspose(c) => c.forward(x),
        }
    }

    fn infer(&self, x: Array2<T>) -> Array2<T> {
        match self {
            Layer::Linear(l) => l.infer(&x),
            Layer::Relu(r) => r.infer(x),
            Layer::Conv(c) => c.infer(&x),
            Layer::ConvTranspose(c) => c.infer(&x),
        }
    }

    fn backward(&mut self, grad: Array2<T>) -> Array2<T> {
        match self {
            Layer::Linear(l) => l.backward(&grad),
            Layer::Relu(r) => r.backward(grad),
            Layer::Conv(c) => c.backward(&grad),
            Layer::ConvTranspose(c) => c.backward(&grad),
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        match self {
            Layer::Linear(l) => l.params_mut(prefix, out),
            Layer::Conv(c) => c.params_mut(prefix, out),
            Layer::ConvTranspose(c) => c.params_mut(prefix, out),
            Layer::Relu(_) => {}
        }
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        match self {
            Layer::Linear(l) => l.params(prefix, out),
            Layer::Conv(c) => c.params(prefix, out),
            Layer::ConvTranspose(c) => c.params(prefix, out),
            Layer::Relu(_) => {}
        }
    }
}

/// A chain of layers. `forward` caches activations for `backward`;
/// `infer` is side-effect free.
#[derive(Debug, Clone, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: Array2<T>) -> Array2<T> {
        self.layers.iter_mut().fold(x, |acc, layer| layer.forward(acc))
    }

    pub fn infer(&self, x: Array2<T>) -> Array2<T> {
        self.layers.iter().fold(x, |acc, layer| layer.infer(acc))
    }

    pub fn backward(&mut self, grad: Array2<T>) -> Array2<T> {
        self.layers
            .iter_mut()
            .rev()
            .fold(grad, |acc, layer| layer.backward(acc))
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.params_mut(&format!("{prefix}.{i}"), out);
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("{prefix}.{i}"), out);
        }
    }
}

/// Glorot-uniform initialization.
pub(crate) fn glorot<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    shape: (usize, usize),
) -> Array2<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || T::of(rng.random_range(-limit..limit)))
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Central-difference check of `d(sum(out ⊙ weights))/d(param)` against
    /// the analytic gradients accumulated by `backward`.
    pub fn check_sequential(net: &mut Sequential<f64>, x: &Array2<f64>, tol: f64) {
        let out = net.forward(x.clone());
        let weights = Array2::from_shape_fn(out.dim(), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
        {
            let mut ps = Vec::new();
            net.params_mut("n", &mut ps);
            for p in ps {
                p.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        let dx = net.backward(weights.clone());
        let objective = |n: &Sequential<f64>, input: &Array2<f64>| (n.infer(input.clone()) * &weights).sum();

        let h = 1e-5;
        let mut ps = Vec::new();
        let mut snapshot = net.clone();
        net.params_mut("n", &mut ps);
        let analytic: Vec<Vec<f64>> = ps.iter().map(|p| p.grad.to_vec()).collect();
        drop(ps);
        for (pi, grads) in analytic.iter().enumerate() {
            for (k, g) in grads.iter().enumerate() {
                let eval = |delta: f64, s: &mut Sequential<f64>| {
                    let mut ps = Vec::new();
                    s.params_mut("n", &mut ps);
                    ps[pi].value[k] += delta;
                    drop(ps);
                    let v = objective(s, x);
                    let mut ps = Vec::new();
                    s.params_mut("n", &mut ps);
                    ps[pi].value[k] -= delta;
                    v
                };
                let numeric = (eval(h, &mut snapshot) - eval(-h, &mut snapshot)) / (2.0 * h);
                let denom = numeric.abs().max(g.abs()).max(1e-6);
                assert!((numeric - g).abs() / denom < tol, "param {pi}[{k}]: {numeric} vs {g}");
            }
        }
        for (idx, g) in dx.iter().enumerate() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (objective(net, &xp) - objective(net, &xm)) / (2.0 * h);
            let denom = numeric.abs().max(g.abs()).max(1e-6);
            assert!((numeric - g).abs() / denom < tol, "input {idx}: {numeric} vs {g}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Sequential::new(vec![
            Layer::Linear(Linear::new(&mut rng, 5, 7)),
            Layer::relu(),
            Layer::Linear(Linear::new(&mut rng, 7, 3)),
        ]);
        let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        gradcheck::check_sequential(&mut net, &x, 1e-5);
    }
}
