use super::ParamMut;
use crate::scalar::Scalar;

/// Adaptive moment estimation with per-slot bias correction, so a slot can
/// be reset (e.g. after re-initializing the parameters it tracks) without
/// disturbing the others.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub(crate) steps: Vec<u64>,
    pub(crate) first: Vec<Vec<T>>,
    pub(crate) second: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: Vec::new(),
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    fn ensure_slots(&mut self, params: &[ParamMut<'_, T>]) {
        if self.first.len() != params.len() {
            self.steps = vec![0; params.len()];
            self.first = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.second = self.first.clone();
        }
    }

    pub fn step(&mut self, params: &mut [ParamMut<'_, T>], learning_rate: f64) {
        self.ensure_slots(params);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let eps = T::of(self.epsilon);
        for (slot, p) in params.iter_mut().enumerate() {
            self.steps[slot] += 1;
            let t = self.steps[slot] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let step_size = T::of(learning_rate * c2.sqrt() / c1);
            let eps_hat = eps * T::of(c2.sqrt());
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() + eps_hat);
            }
        }
    }

    /// Forgets the moments of the given slot.
    pub fn reset_slot(&mut self, slot: usize) {
        if slot < self.first.len() {
            self.steps[slot] = 0;
            self.first[slot].iter_mut().for_each(|x| *x = T::zero());
            self.second[slot].iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn slot_count(&self) -> usize {
        self.first.len()
    }
}
