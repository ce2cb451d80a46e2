use ndarray::{Array1, Array4, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};

use super::{Grads, Params};
use crate::{par, Real};

const EPS: f64 = 1e-5;

/// Batch normalisation over `(N, H, W)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
}

pub struct BatchNormCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: T::of(0.1),
        }
    }

    /// Normalises with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: ArrayView4<'_, T>) -> (Array4<T>, BatchNormCache<T>) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(c);
        for ch in 0..c {
            let mut plane = xhat.index_axis_mut(Axis(1), ch);
            // two-pass in f64 for stable statistics
            let mean = plane.iter().map(|v| v.f64()).sum::<f64>() / m;
            let var = plane.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / m;
            let is = 1.0 / (var + EPS).sqrt();
            let (mt, mu) = (T::of(mean), self.momentum);
            plane.mapv_inplace(|v| (v - mt) * T::of(is));
            inv_std[ch] = T::of(is);
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean[ch] = (T::one() - mu) * self.running_mean[ch] + mu * mt;
            self.running_var[ch] = (T::one() - mu) * self.running_var[ch] + mu * T::of(unbiased);
        }
        let y = self.affine(&xhat);
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: ArrayView4<'_, T>) -> Array4<T> {
        let mut y = x.to_owned();
        for (ch, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let is = T::one() / (self.running_var[ch] + T::of(EPS)).sqrt();
            let scale = self.gamma[ch] * is;
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            plane.mapv_inplace(|v| v * scale + shift);
        }
        y
    }

    fn affine(&self, xhat: &Array4<T>) -> Array4<T> {
        let mut y = xhat.clone();
        for (ch, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            plane.mapv_inplace(|v| v * g + b);
        }
        y
    }

    pub fn backward(&self, cache: &BatchNormCache<T>, dy: ArrayView4<'_, T>) -> (Array4<T>, Grads<T>) {
        let (n, c, h, w) = dy.dim();
        let m = T::of((n * h * w) as f64);
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        let mut dx = Array4::zeros(dy.raw_dim());
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xc = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy: T = dyc.sum();
            let sum_dy_x: T = dyc.iter().zip(xc.iter()).map(|(&a, &b)| a * b).sum();
            dgamma[ch] = sum_dy_x;
            dbeta[ch] = sum_dy;
            let k = self.gamma[ch] * cache.inv_std[ch] / m;
            ndarray::Zip::from(dx.index_axis_mut(Axis(1), ch))
                .and(&dyc)
                .and(&xc)
                .for_each(|d, &g, &x| *d = k * (m * g - sum_dy - x * sum_dy_x));
        }
        (dx, vec![dgamma.into_dyn(), dbeta.into_dyn()])
    }
}

impl<T: Real> Params<T> for BatchNorm2d<T> {
    fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![self.gamma.view().into_dyn(), self.beta.view().into_dyn()]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![self.gamma.view_mut().into_dyn(), self.beta.view_mut().into_dyn()]
    }

    fn buffers(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![self.running_mean.view().into_dyn(), self.running_var.view().into_dyn()]
    }

    fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![self.running_mean.view_mut().into_dyn(), self.running_var.view_mut().into_dyn()]
    }
}

/// Instance normalisation: statistics per sample and channel over `(H, W)`,
/// learnable affine. With `enabled == false` the layer is the identity.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub enabled: bool,
}

pub struct InstanceNormCache<T> {
    xhat: Array4<T>,
    /// `n * c` inverse standard deviations
    inv_std: Vec<T>,
}

impl<T: Real> InstanceNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self { gamma: Array1::ones(channels), beta: Array1::zeros(channels), enabled: true }
    }

    pub fn forward(&self, x: ArrayView4<'_, T>) -> (Array4<T>, InstanceNormCache<T>) {
        let (_, _, h, w) = x.dim();
        let hw = h * w;
        let mut xhat = x.as_standard_layout().into_owned();
        if !self.enabled {
            return (xhat.clone(), InstanceNormCache { xhat, inv_std: Vec::new() });
        }
        let inv_std: Vec<T> = {
            let data = xhat.as_slice_mut().expect("standard");
            let mut planes: Vec<(&mut [T], T)> = data.chunks_mut(hw).map(|p| (p, T::zero())).collect();
            par::for_each_mut(&mut planes, |_, (p, inv)| {
                let m = p.len() as f64;
                let mean = p.iter().map(|v| v.f64()).sum::<f64>() / m;
                let var = p.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / m;
                let is = T::of(1.0 / (var + EPS).sqrt());
                let mt = T::of(mean);
                p.iter_mut().for_each(|v| *v = (*v - mt) * is);
                *inv = is;
            });
            planes.into_iter().map(|(_, inv)| inv).collect()
        };
        let mut y = xhat.clone();
        for mut sample in y.outer_iter_mut() {
            for (ch, mut plane) in sample.outer_iter_mut().enumerate() {
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                plane.mapv_inplace(|v| v * g + b);
            }
        }
        (y, InstanceNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &InstanceNormCache<T>, dy: ArrayView4<'_, T>) -> (Array4<T>, Grads<T>) {
        let (n, c, h, w) = dy.dim();
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        if !self.enabled {
            return (dy.to_owned(), vec![dgamma.into_dyn(), dbeta.into_dyn()]);
        }
        let m = T::of((h * w) as f64);
        let mut dx = Array4::zeros(dy.raw_dim());
        for i in 0..n {
            for ch in 0..c {
                let g = dy.slice(ndarray::s![i, ch, .., ..]);
                let x = cache.xhat.slice(ndarray::s![i, ch, .., ..]);
                let sum_dy: T = g.sum();
                let sum_dy_x: T = g.iter().zip(x.iter()).map(|(&a, &b)| a * b).sum();
                dgamma[ch] += sum_dy_x;
                dbeta[ch] += sum_dy;
                let k = self.gamma[ch] * cache.inv_std[i * c + ch] / m;
                ndarray::Zip::from(dx.slice_mut(ndarray::s![i, ch, .., ..]))
                    .and(&g)
                    .and(&x)
                    .for_each(|d, &g, &x| *d = k * (m * g - sum_dy - x * sum_dy_x));
            }
        }
        (dx, vec![dgamma.into_dyn(), dbeta.into_dyn()])
    }
}

impl<T: Real> Params<T> for InstanceNorm2d<T> {
    fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![self.gamma.view().into_dyn(), self.beta.view().into_dyn()]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![self.gamma.view_mut().into_dyn(), self.beta.view_mut().into_dyn()]
    }
}
