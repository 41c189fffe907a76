use crate::network::{Gradients, LstmModel};
use crate::Scalar;

/// SGD with classical momentum: `v = mu * v + g; w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    /// Rescales the whole gradient when its L2 norm exceeds this.
    pub max_grad_norm: Option<T>,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T, momentum: T, max_grad_norm: Option<T>) -> Self {
        Self {
            learning_rate,
            momentum,
            max_grad_norm,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut LstmModel<T>, grads: &Gradients<T>) {
        let slices = grads.slices();
        let norm = slices.iter().flat_map(|s| s.iter()).map(|&g| g * g).sum::<T>().sqrt();
        let scale = match self.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => T::one(),
        };
        if self.velocity.len() != slices.len() {
            self.velocity = slices.iter().map(|s| vec![T::zero(); s.len()]).collect();
        }
        for ((params, g), v) in model.params_mut().into_iter().zip(&slices).zip(&mut self.velocity) {
            for ((w, &g), v) in params.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g * scale;
                *w -= self.learning_rate * *v;
            }
        }
    }
}
