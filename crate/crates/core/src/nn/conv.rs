use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMut2, ArrayViewMutD, Axis};
use rand::Rng;

use super::{normal_vec, Grads, Params};
use crate::{par, Error, Real, Result};

/// Kernel, stride and padding of a square 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    /// Output size of a convolution over an input of size `n`.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        (n + 2 * self.padding).checked_sub(self.kernel).map(|v| v / self.stride + 1)
    }

    /// Output size of the transposed convolution over an input of size `n`.
    pub fn transpose_out(&self, n: usize) -> Option<usize> {
        ((n - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Unfolds one `C x H x W` sample into a `(C*k*k) x (oh*ow)` matrix where
/// column `(i, j)` holds the patch read by output position `(i, j)`.
pub fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    g: Geometry,
    (oh, ow): (usize, usize),
) -> Array2<T> {
    let k = g.kernel;
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    let data = cols.as_slice_mut().expect("standard layout");
    let (s, p) = (g.stride as isize, g.padding as isize);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut data[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let ih = i as isize * s - p + ki as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let out = &mut dst[i * ow..(i + 1) * ow];
                    for (j, o) in out.iter_mut().enumerate() {
                        let iw = j as isize * s - p + kj as isize;
                        if iw >= 0 && iw < w as isize {
                            *o = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto a
/// `C x H x W` buffer (which is overwritten).
pub fn col2im<T: Real>(
    cols: ArrayView2<'_, T>,
    out: &mut [T],
    (c, h, w): (usize, usize, usize),
    g: Geometry,
    (oh, ow): (usize, usize),
) {
    out.iter_mut().for_each(|v| *v = T::zero());
    let k = g.kernel;
    let (s, p) = (g.stride as isize, g.padding as isize);
    let cols = cols.as_standard_layout();
    let data = cols.as_slice().expect("standard layout");
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &data[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let ih = i as isize * s - p + ki as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for (j, &v) in src[i * ow..(i + 1) * ow].iter().enumerate() {
                        let iw = j as isize * s - p + kj as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn standard<T: Real>(x: ArrayView4<'_, T>) -> std::borrow::Cow<'_, [T]> {
    match x.to_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// Square convolution with "same"-style geometry chosen by the caller.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `out x (in * k * k)`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub geometry: Geometry,
    in_ch: usize,
    out_ch: usize,
}

pub struct ConvCache<T> {
    cols: Vec<Array2<T>>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    /// He-initialised convolution with zero bias.
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, geometry: Geometry, rng: &mut R) -> Self {
        let fan_in = in_ch * geometry.kernel * geometry.kernel;
        let w = normal_vec(rng, out_ch * fan_in, (2.0 / fan_in as f64).sqrt());
        Self {
            weight: Array2::from_shape_vec((out_ch, fan_in), w).expect("sized"),
            bias: Array1::zeros(out_ch),
            geometry,
            in_ch,
            out_ch,
        }
    }

    /// 3x3, stride 1, padding 1.
    pub fn same3x3<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self::new(in_ch, out_ch, Geometry { kernel: 3, stride: 1, padding: 1 }, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.geometry.conv_out(h), self.geometry.conv_out(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
            _ => Err(Error::Shape(format!("conv input {h}x{w} too small for {:?}", self.geometry))),
        }
    }

    fn check_input(&self, x: &ArrayView4<'_, T>) -> Result<()> {
        if x.len_of(Axis(1)) != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch,
                x.len_of(Axis(1))
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView4<'_, T>) -> Result<(Array4<T>, ConvCache<T>)> {
        self.check_input(&x)?;
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w)?;
        let src = standard(x);
        let chw = c * h * w;
        let g = self.geometry;
        let cols = par::map_range(n, |i| im2col(&src[i * chw..(i + 1) * chw], (c, h, w), g, (oh, ow)));
        let out = self.apply(&cols, n, (oh, ow));
        Ok((out, ConvCache { cols, in_dim: (n, c, h, w), out_hw: (oh, ow) }))
    }

    /// Forward pass without keeping the unfolded input.
    pub fn forward_eval(&self, x: ArrayView4<'_, T>) -> Result<Array4<T>> {
        self.check_input(&x)?;
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w)?;
        let src = standard(x);
        let chw = c * h * w;
        let g = self.geometry;
        let mut out = Array4::zeros((n, self.out_ch, oh, ow));
        let per = self.out_ch * oh * ow;
        par::for_each_chunk_mut(out.as_slice_mut().expect("standard"), per, |i, o| {
            let cols = im2col(&src[i * chw..(i + 1) * chw], (c, h, w), g, (oh, ow));
            self.gemm_into(&cols, o, oh * ow);
        });
        Ok(out)
    }

    fn apply(&self, cols: &[Array2<T>], n: usize, (oh, ow): (usize, usize)) -> Array4<T> {
        let mut out = Array4::zeros((n, self.out_ch, oh, ow));
        let per = self.out_ch * oh * ow;
        par::for_each_chunk_mut(out.as_slice_mut().expect("standard"), per, |i, o| {
            self.gemm_into(&cols[i], o, oh * ow);
        });
        out
    }

    fn gemm_into(&self, cols: &Array2<T>, o: &mut [T], hw: usize) {
        let mut ov = ArrayViewMut2::from_shape((self.out_ch, hw), o).expect("sized");
        for (mut row, &b) in ov.outer_iter_mut().zip(&self.bias) {
            row.fill(b);
        }
        general_mat_mul(T::one(), &self.weight, cols, T::one(), &mut ov);
    }

    pub fn backward(&self, cache: &ConvCache<T>, dy: ArrayView4<'_, T>) -> (Array4<T>, Grads<T>) {
        let (n, c, h, w) = cache.in_dim;
        let (oh, ow) = cache.out_hw;
        let hw = oh * ow;
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard");
        let per = self.out_ch * hw;
        let g = self.geometry;

        let mut dx = Array4::zeros((n, c, h, w));
        let wt = self.weight.t();
        par::for_each_chunk_mut(dx.as_slice_mut().expect("standard"), c * h * w, |i, d| {
            let dyi = ArrayView2::from_shape((self.out_ch, hw), &dys[i * per..(i + 1) * per]).expect("sized");
            let dcols = wt.dot(&dyi);
            col2im(dcols.view(), d, (c, h, w), g, (oh, ow));
        });

        let mut dw = Array2::zeros(self.weight.raw_dim());
        let mut db = Array1::zeros(self.out_ch);
        for i in 0..n {
            let dyi = ArrayView2::from_shape((self.out_ch, hw), &dys[i * per..(i + 1) * per]).expect("sized");
            general_mat_mul(T::one(), &dyi, &cache.cols[i].t(), T::one(), &mut dw);
            db += &dyi.sum_axis(Axis(1));
        }
        (dx, vec![dw.into_dyn(), db.into_dyn()])
    }
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![self.weight.view().into_dyn(), self.bias.view().into_dyn()]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![self.weight.view_mut().into_dyn(), self.bias.view_mut().into_dyn()]
    }
}

/// Transposed convolution (fractionally strided), `in -> out` channels.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    /// `in x (out * k * k)`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub geometry: Geometry,
    in_ch: usize,
    out_ch: usize,
}

pub struct ConvTransposeCache<T> {
    input: Array4<T>,
    out_hw: (usize, usize),
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, geometry: Geometry, rng: &mut R) -> Self {
        let k2 = geometry.kernel * geometry.kernel;
        let fan_in = in_ch * k2;
        let w = normal_vec(rng, in_ch * out_ch * k2, (2.0 / fan_in as f64).sqrt());
        Self {
            weight: Array2::from_shape_vec((in_ch, out_ch * k2), w).expect("sized"),
            bias: Array1::zeros(out_ch),
            geometry,
            in_ch,
            out_ch,
        }
    }

    /// Channel-diagonal bilinear upsampling kernel (requires `in == out`).
    pub fn bilinear(channels: usize, geometry: Geometry) -> Self {
        let k = geometry.kernel;
        let f = (k as f64 / 2.0).ceil();
        let center = if k % 2 == 1 { f - 1.0 } else { f - 0.5 };
        let mut weight = Array2::zeros((channels, channels * k * k));
        for c in 0..channels {
            for i in 0..k {
                for j in 0..k {
                    let v = (1.0 - (i as f64 - center).abs() / f) * (1.0 - (j as f64 - center).abs() / f);
                    weight[[c, (c * k + i) * k + j]] = T::of(v);
                }
            }
        }
        Self { weight, bias: Array1::zeros(channels), geometry, in_ch: channels, out_ch: channels }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.geometry.transpose_out(h), self.geometry.transpose_out(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
            _ => Err(Error::Shape(format!(
                "transposed conv input {h}x{w} invalid for {:?}",
                self.geometry
            ))),
        }
    }

    pub fn forward(&self, x: ArrayView4<'_, T>) -> Result<(Array4<T>, ConvTransposeCache<T>)> {
        let (n, c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(Error::Config(format!(
                "transposed conv has {} input channels, features have {c}",
                self.in_ch
            )));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        let input = x.as_standard_layout().into_owned();
        let src = input.as_slice().expect("standard");
        let chw = c * h * w;
        let g = self.geometry;
        let per = self.out_ch * oh * ow;
        let mut out = Array4::zeros((n, self.out_ch, oh, ow));
        par::for_each_chunk_mut(out.as_slice_mut().expect("standard"), per, |i, o| {
            let xi = ArrayView2::from_shape((c, h * w), &src[i * chw..(i + 1) * chw]).expect("sized");
            let cols = self.weight.t().dot(&xi);
            col2im(cols.view(), o, (self.out_ch, oh, ow), g, (h, w));
            for (ch, plane) in o.chunks_mut(oh * ow).enumerate() {
                let b = self.bias[ch];
                plane.iter_mut().for_each(|v| *v += b);
            }
        });
        Ok((out, ConvTransposeCache { input, out_hw: (oh, ow) }))
    }

    pub fn backward(&self, cache: &ConvTransposeCache<T>, dy: ArrayView4<'_, T>) -> (Array4<T>, Grads<T>) {
        let (n, c, h, w) = cache.input.dim();
        let (oh, ow) = cache.out_hw;
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard");
        let per = self.out_ch * oh * ow;
        let g = self.geometry;
        let dcols: Vec<Array2<T>> = par::map_range(n, |i| {
            im2col(&dys[i * per..(i + 1) * per], (self.out_ch, oh, ow), g, (h, w))
        });
        let mut dx = Array4::zeros((n, c, h, w));
        par::for_each_chunk_mut(dx.as_slice_mut().expect("standard"), c * h * w, |i, d| {
            let mut dv = ArrayViewMut2::from_shape((c, h * w), d).expect("sized");
            general_mat_mul(T::one(), &self.weight, &dcols[i], T::zero(), &mut dv);
        });
        let src = cache.input.as_slice().expect("standard");
        let chw = c * h * w;
        let mut dw = Array2::zeros(self.weight.raw_dim());
        let mut db = Array1::zeros(self.out_ch);
        for i in 0..n {
            let xi = ArrayView2::from_shape((c, h * w), &src[i * chw..(i + 1) * chw]).expect("sized");
            general_mat_mul(T::one(), &xi, &dcols[i].t(), T::one(), &mut dw);
            for (ch, plane) in dys[i * per..(i + 1) * per].chunks(oh * ow).enumerate() {
                db[ch] += plane.iter().copied().sum::<T>();
            }
        }
        (dx, vec![dw.into_dyn(), db.into_dyn()])
    }
}

impl<T: Real> Params<T> for ConvTranspose2d<T> {
    fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![self.weight.view().into_dyn(), self.bias.view().into_dyn()]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![self.weight.view_mut().into_dyn(), self.bias.view_mut().into_dyn()]
    }
}
