use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{normal_vec, Grads, Params};
use crate::{Error, Real, Result};

pub fn relu_inplace<T: Real>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| v.max(T::zero()));
}

/// Masks `dy` by the positive entries of the ReLU output `y`.
pub fn relu_backward_inplace<T: Real>(dy: &mut Array4<T>, y: ArrayView4<'_, T>) {
    ndarray::Zip::from(dy).and(&y).for_each(|d, &y| {
        if y <= T::zero() {
            *d = T::zero();
        }
    });
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Real>(x: ArrayView4<'_, T>) -> Result<Array4<T>> {
    let (n, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("2x2 pooling needs even spatial size, got {h}x{w}")));
    }
    let q = T::of(0.25);
    let mut y = Array4::zeros((n, c, h / 2, w / 2));
    for ((b, ch, i, j), v) in y.indexed_iter_mut() {
        let (i2, j2) = (2 * i, 2 * j);
        *v = (x[[b, ch, i2, j2]] + x[[b, ch, i2, j2 + 1]] + x[[b, ch, i2 + 1, j2]] + x[[b, ch, i2 + 1, j2 + 1]]) * q;
    }
    Ok(y)
}

pub fn avg_pool2_backward<T: Real>(dy: ArrayView4<'_, T>) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    let q = T::of(0.25);
    let mut dx = Array4::zeros((n, c, 2 * h, 2 * w));
    for ((b, ch, i, j), &g) in dy.indexed_iter() {
        let g = g * q;
        dx.slice_mut(s![b, ch, 2 * i..2 * i + 2, 2 * j..2 * j + 2]).fill(g);
    }
    dx
}

pub fn global_avg_pool<T: Real>(x: ArrayView4<'_, T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let inv = T::one() / T::of((h * w) as f64);
    let mut y = Array2::zeros((n, c));
    for b in 0..n {
        for ch in 0..c {
            y[[b, ch]] = x.slice(s![b, ch, .., ..]).sum() * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<T: Real>(dy: ArrayView2<'_, T>, hw: (usize, usize)) -> Array4<T> {
    let (n, c) = dy.dim();
    let inv = T::one() / T::of((hw.0 * hw.1) as f64);
    let mut dx = Array4::zeros((n, c, hw.0, hw.1));
    for b in 0..n {
        for ch in 0..c {
            dx.slice_mut(s![b, ch, .., ..]).fill(dy[[b, ch]] * inv);
        }
    }
    dx
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `out x in`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = normal_vec(rng, inputs * outputs, (1.0 / inputs as f64).sqrt());
        Self { weight: Array2::from_shape_vec((outputs, inputs), w).expect("sized"), bias: Array1::zeros(outputs) }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>) -> (Array2<T>, Grads<T>) {
        let dw = dy.t().dot(&x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.weight);
        (dx, vec![dw.into_dyn(), db.into_dyn()])
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![self.weight.view().into_dyn(), self.bias.view().into_dyn()]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![self.weight.view_mut().into_dyn(), self.bias.view_mut().into_dyn()]
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut p = logits.to_owned();
    for mut row in p.outer_iter_mut() {
        let m = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let (n, z) = logits.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= z) {
        return Err(Error::Param(format!("label {bad} out of range for {z} classes")));
    }
    let mut grad = softmax_rows(logits);
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    for (mut row, &y) in grad.outer_iter_mut().zip(labels) {
        loss -= row[y].max(T::min_positive_value()).ln();
        row[y] -= T::one();
        row.mapv_inplace(|v| v * inv_n);
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pool_roundtrip_shapes() {
        let x = Array4::from_shape_fn((1, 2, 4, 6), |(_, c, h, w)| (c * 100 + h * 10 + w) as f64);
        let y = avg_pool2(x.view()).unwrap();
        assert_eq!(y.dim(), (1, 2, 2, 3));
        assert_eq!(y[[0, 0, 0, 0]], (0.0 + 1.0 + 10.0 + 11.0) / 4.0);
        assert!(avg_pool2(Array4::<f64>::zeros((1, 1, 3, 4)).view()).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Array2::<f64>::zeros((3, 7));
        let (l, g) = cross_entropy(logits.view(), &[0, 3, 6]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        assert!(g.sum().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = array![[0.0, 1.0]];
        assert!(cross_entropy(logits.view(), &[2]).is_err());
    }
}
