//! Hand-written layers with explicit forward caches and backward passes.
//!
//! Tensors are `N x C x H x W` in standard layout. Each layer exposes its
//! trainable arrays through [`Params`] in a fixed order; `backward` returns
//! gradients in that same order, which is what the optimizer zips against.

mod conv;
mod dense;
mod norm;

pub use conv::{col2im, im2col, Conv2d, ConvCache, ConvTranspose2d, ConvTransposeCache, Geometry};
pub use dense::{
    avg_pool2, avg_pool2_backward, cross_entropy, global_avg_pool, global_avg_pool_backward,
    relu_backward_inplace, relu_inplace, softmax_rows, Linear,
};
pub use norm::{BatchNorm2d, BatchNormCache, InstanceNorm2d, InstanceNormCache};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Real;

/// Gradients, one array per trainable parameter in [`Params`] order.
pub type Grads<T> = Vec<ArrayD<T>>;

/// Access to trainable arrays in a stable order.
pub trait Params<T> {
    fn params(&self) -> Vec<ArrayViewD<'_, T>>;
    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>>;

    /// Non-trainable state that still has to be checkpointed (running
    /// statistics).
    fn buffers(&self) -> Vec<ArrayViewD<'_, T>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Zero-mean normal samples with the given standard deviation.
pub(crate) fn normal_vec<T: Real, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}

/// Elementwise `acc += g` over two gradient lists of identical structure.
pub fn accumulate<T: Real>(acc: &mut Grads<T>, g: &Grads<T>) {
    assert_eq!(acc.len(), g.len());
    for (a, g) in acc.iter_mut().zip(g) {
        *a += g;
    }
}
