use super::TrainError;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Scalar;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update steps.
    pub step: u64,
    /// First and second moments, one buffer per store entry (empty for buffers).
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8 with zeroed moments shaped like `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            store
                .iter()
                .map(|(_, p)| match p.kind {
                    ParamKind::Learnable => vec![T::zero(); p.tensor.numel()],
                    ParamKind::Buffer => Vec::new(),
                })
                .collect()
        };
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// One update. `grad(i)` returns the gradient of store entry `i`, or
    /// `None` when the entry did not take part in the loss.
    pub fn update<'g>(
        &mut self,
        store: &mut ParamStore<T>,
        mut grad: impl FnMut(usize) -> Option<&'g [T]>,
        lr: f64,
    ) -> Result<(), TrainError>
    where
        T: 'g,
    {
        if self.m.len() != store.len() {
            return Err(TrainError::State(format!("optimizer tracks {} tensors, store has {}", self.m.len(), store.len())));
        }
        // Validate first so a bad gradient leaves parameters and moments untouched.
        let grads: Vec<Option<&[T]>> = (0..store.len()).map(&mut grad).collect();
        for ((_, p), g) in store.iter().zip(&grads) {
            if let (ParamKind::Learnable, Some(g)) = (p.kind, g) {
                if g.len() != p.tensor.numel() {
                    return Err(TrainError::State(format!("gradient of {} has {} values", p.name, g.len())));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NonFiniteGradient { param: p.name.clone() });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, eps, lr) = (T::one(), T::from_f64_lossy(self.eps), T::from_f64_lossy(lr));
        for (i, (_, p)) in store.iter_mut().enumerate() {
            if p.kind != ParamKind::Learnable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = p.tensor.data_mut();
            match grads[i] {
                Some(g) => {
                    for k in 0..w.len() {
                        m[k] = b1 * m[k] + (one - b1) * g[k];
                        v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                        w[k] = w[k] - lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
                None => {
                    for k in 0..w.len() {
                        m[k] = b1 * m[k];
                        v[k] = b2 * v[k];
                        w[k] = w[k] - lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn one_param(w: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(Shape::scalar(), w), ParamKind::Learnable);
        s.add("buf", Tensor::full(Shape::scalar(), 3.0), ParamKind::Buffer);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one_param(0.0);
        let mut adam = Adam::new(&s);
        let g = [1.0f32];
        adam.update(&mut s, |i| (i == 0).then_some(&g[..]), 0.1).unwrap();
        let w = s.tensor(s.find("w").unwrap()).data()[0];
        assert!((w + 0.1).abs() < 1e-6, "{w}");
        assert_eq!(s.tensor(s.find("buf").unwrap()).data()[0], 3.0);
    }

    #[test]
    fn zero_gradient_keeps_weights_and_decays_moments() {
        let mut s = one_param(0.5);
        let mut adam = Adam::new(&s);
        let g = [2.0f32];
        adam.update(&mut s, |i| (i == 0).then_some(&g[..]), 0.0).unwrap();
        assert_eq!(s.tensor(s.find("w").unwrap()).data()[0], 0.5);
        let (m, v) = (adam.m[0][0], adam.v[0][0]);
        let z = [0.0f32];
        let before = s.clone();
        adam.update(&mut s, |i| (i == 0).then_some(&z[..]), 0.0).unwrap();
        assert_eq!(s, before);
        assert_eq!(adam.m[0][0], 0.9 * m);
        assert_eq!(adam.v[0][0], 0.999 * v);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = one_param(0.0);
        let mut adam = Adam::new(&s);
        let g = [f32::NAN];
        match adam.update(&mut s, |i| (i == 0).then_some(&g[..]), 0.1) {
            Err(TrainError::NonFiniteGradient { param }) => assert_eq!(param, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.step, 0);
    }
}
