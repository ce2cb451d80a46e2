use ndarray::ArrayViewMutD;

use crate::nn::Grads;
use crate::Real;

/// Cosine-annealed learning rate for `epoch` out of `epochs`; equals `base`
/// at epoch 0 and reaches 0 at `epoch == epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    let t = epoch.min(epochs) as f64 / epochs as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Grads<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: None }
    }

    /// `v = mu v + (g + wd p)`, `p -= lr v`.
    pub fn step(&mut self, params: Vec<ArrayViewMutD<'_, T>>, grads: &Grads<T>, lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        let velocity = self.velocity.get_or_insert_with(|| grads.iter().map(|g| g.mapv(|_| T::zero())).collect());
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((mut p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
            ndarray::Zip::from(&mut p).and(g).and(v).for_each(|p, &g, v| {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 30), 0.1);
        assert!(cosine_lr(0.1, 30, 30).abs() < 1e-8);
        assert!((cosine_lr(0.1, 15, 30) - 0.05).abs() < 1e-6);
        assert!((0..30).all(|e| cosine_lr(0.1, e + 1, 30) < cosine_lr(0.1, e, 30)));
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut p: ArrayD<f64> = arr1(&[1.0, -2.0]).into_dyn();
        let g: Grads<f64> = vec![arr1(&[0.5, 0.5]).into_dyn()];
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(vec![p.view_mut()], &g, 0.1);
        // v = g + wd p = [0.6, 0.3]
        assert!((p[0] - (1.0 - 0.06)).abs() < 1e-15);
        assert!((p[1] - (-2.0 - 0.03)).abs() < 1e-15);
        opt.step(vec![p.view_mut()], &g, 0.1);
        // v = 0.9 [0.6, 0.3] + 0.5 + 0.1 p
        let v0 = 0.9 * 0.6 + 0.5 + 0.1 * 0.94;
        assert!((p[0] - (0.94 - 0.1 * v0)).abs() < 1e-15);
    }
}
