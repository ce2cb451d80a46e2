//! Spatial attention primitives.
//!
//! All operators work on one sample at a time. A feature block is a
//! `C x H x W` tensor; the in-channel attention is its per-channel spatial
//! softmax, and the cross-channel / cross-model reductions collapse it to a
//! single `H x W` map. Backward passes are provided for everything the
//! losses differentiate through.

use std::cmp::Ordering;

use ndarray::{Array2, Array3, ArrayBase, ArrayView2, ArrayView3, ArrayView4, Axis, Data, Dimension};

use crate::{par, Error, Real, Result};

/// Feature maps of one sample at one backbone block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock<T> {
    values: Array3<T>,
    block: usize,
}

impl<T: Real> FeatureBlock<T> {
    /// `block` is 1-based, matching the backbone's block numbering.
    pub fn new(values: Array3<T>, block: usize) -> Result<Self> {
        check_nonempty(values.shape())?;
        check_finite(&values)?;
        if block == 0 {
            return Err(Error::Param("block index is 1-based".into()));
        }
        Ok(Self { values, block })
    }

    pub fn values(&self) -> ArrayView3<'_, T> {
        self.values.view()
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn into_inner(self) -> Array3<T> {
        self.values
    }
}

/// Per-channel spatial probability distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct InChannelAttention<T>(Array3<T>);

impl<T: Real> InChannelAttention<T> {
    /// Validates that every channel is a distribution over `H x W`.
    pub fn new(values: Array3<T>) -> Result<Self> {
        check_nonempty(values.shape())?;
        check_finite(&values)?;
        if let Some(((c, h, w), v)) = values
            .indexed_iter()
            .find(|(_, &v)| v <= T::zero() || v > T::one())
        {
            return Err(Error::Param(format!(
                "attention entry {v} at ({c}, {h}, {w}) outside (0, 1]"
            )));
        }
        let tol = T::mass_tolerance();
        for (c, ch) in values.outer_iter().enumerate() {
            let s: T = ch.sum();
            if (s - T::one()).abs() > tol {
                return Err(Error::Param(format!("channel {c} sums to {s}, not 1")));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> ArrayView3<'_, T> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn into_inner(self) -> Array3<T> {
        self.0
    }
}

/// A single `H x W` attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap<T>(Array2<T>);

impl<T: Real> SpatialMap<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        check_nonempty(values.shape())?;
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn values(&self) -> ArrayView2<'_, T> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn sum(&self) -> T {
        self.0.sum()
    }

    pub fn into_inner(self) -> Array2<T> {
        self.0
    }
}

fn check_nonempty(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("every dimension must be >= 1, got {shape:?}")));
    }
    Ok(())
}

/// Rejects NaN/Inf, reporting the multi-index of the first offender in
/// logical order.
pub fn check_finite<T, S, D>(a: &ArrayBase<S, D>) -> Result<()>
where
    T: Real,
    S: Data<Elem = T>,
    D: Dimension,
{
    if let Some(flat) = a.iter().position(|v| !v.is_finite()) {
        let mut index = vec![0; a.ndim()];
        let mut rem = flat;
        for (slot, &d) in index.iter_mut().zip(a.shape()).rev() {
            *slot = rem % d;
            rem /= d;
        }
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

/// Per-channel softmax over the spatial positions, stabilised by
/// subtracting each channel's maximum.
pub fn spatial_softmax<T: Real>(x: ArrayView3<'_, T>) -> Result<InChannelAttention<T>> {
    check_nonempty(x.shape())?;
    check_finite(&x)?;
    Ok(InChannelAttention(softmax_unchecked(x)))
}

pub(crate) fn softmax_unchecked<T: Real>(x: ArrayView3<'_, T>) -> Array3<T> {
    let mut out = x.to_owned();
    for mut ch in out.outer_iter_mut() {
        let m = ch.fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        ch.mapv_inplace(|v| {
            let e = (v - m).exp();
            s += e;
            e
        });
        ch.mapv_inplace(|e| e / s);
    }
    out
}

/// Vector-Jacobian product of [`spatial_softmax`]: given the forward output
/// `attn` and `dL/dattn`, returns `dL/dx`.
pub fn spatial_softmax_backward<T: Real>(
    attn: ArrayView3<'_, T>,
    grad: ArrayView3<'_, T>,
) -> Array3<T> {
    let mut dx = Array3::zeros(attn.raw_dim());
    for ((a, g), mut d) in attn.outer_iter().zip(grad.outer_iter()).zip(dx.outer_iter_mut()) {
        let dot: T = a.iter().zip(g.iter()).map(|(&a, &g)| a * g).sum();
        ndarray::Zip::from(&mut d)
            .and(&a)
            .and(&g)
            .for_each(|d, &a, &g| *d = a * (g - dot));
    }
    dx
}

/// Pixel-wise maximum across channels.
pub fn cross_channel_max<T: Real>(a: &InChannelAttention<T>) -> SpatialMap<T> {
    let (map, _) = channel_argmax(a.values());
    SpatialMap(map)
}

/// Per-pixel maximum and the first channel attaining it.
pub fn channel_argmax<T: Real>(a: ArrayView3<'_, T>) -> (Array2<T>, Array2<usize>) {
    let (c, h, w) = a.dim();
    let mut map = Array2::zeros((h, w));
    let mut arg = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut best = a[[0, i, j]];
            let mut at = 0;
            for ch in 1..c {
                let v = a[[ch, i, j]];
                if v > best {
                    best = v;
                    at = ch;
                }
            }
            map[[i, j]] = best;
            arg[[i, j]] = at;
        }
    }
    (map, arg)
}

/// Backward of [`cross_channel_max`]; the gradient goes to the first
/// maximising channel.
pub fn cross_channel_max_backward<T: Real>(
    a: &InChannelAttention<T>,
    grad: ArrayView2<'_, T>,
) -> Array3<T> {
    let (_, arg) = channel_argmax(a.values());
    let mut d = Array3::zeros(a.0.raw_dim());
    for ((i, j), &c) in arg.indexed_iter() {
        d[[c, i, j]] = grad[[i, j]];
    }
    d
}

/// Result of the pixel-wise top-k selection: the averaged map plus, for each
/// pixel, the `k` channels that were averaged.
#[derive(Debug, Clone)]
pub struct TopK<T> {
    map: SpatialMap<T>,
    selected: Vec<u32>,
    k: usize,
    channels: usize,
}

impl<T: Real> TopK<T> {
    pub fn map(&self) -> &SpatialMap<T> {
        &self.map
    }

    pub fn into_map(self) -> SpatialMap<T> {
        self.map
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Channels averaged at `(h, w)`, largest value first.
    pub fn selected_at(&self, h: usize, w: usize) -> &[u32] {
        let wd = self.map.dim().1;
        let at = (h * wd + w) * self.k;
        &self.selected[at..at + self.k]
    }

    /// Scatters `dL/dmap` back onto the selected channels.
    pub fn backward(&self, grad: ArrayView2<'_, T>) -> Array3<T> {
        let (h, w) = self.map.dim();
        let mut d = Array3::zeros((self.channels, h, w));
        let inv_k = T::one() / T::of(self.k as f64);
        for i in 0..h {
            for j in 0..w {
                let g = grad[[i, j]] * inv_k;
                for &c in self.selected_at(i, j) {
                    d[[c as usize, i, j]] += g;
                }
            }
        }
        d
    }
}

/// Pixel-wise mean of the `k` largest channel values.
pub fn topk_mean<T: Real>(a: &InChannelAttention<T>, k: usize) -> Result<SpatialMap<T>> {
    topk_select(a.values(), k).map(TopK::into_map)
}

/// Top-k selection with ties resolved toward the lower channel index.
pub fn topk_select<T: Real>(a: ArrayView3<'_, T>, k: usize) -> Result<TopK<T>> {
    let (c, h, w) = a.dim();
    if k == 0 || k > c {
        return Err(Error::Param(format!("top-k requires 1 <= k <= {c}, got k = {k}")));
    }
    let mut map = Array2::zeros((h, w));
    let mut selected = Vec::with_capacity(h * w * k);
    let mut buf: Vec<(T, u32)> = Vec::with_capacity(c);
    for i in 0..h {
        for j in 0..w {
            buf.clear();
            buf.extend((0..c).map(|ch| (a[[ch, i, j]], ch as u32)));
            // stable: equal values keep channel order
            buf.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(Ordering::Equal));
            let mut s = T::zero();
            for &(v, ch) in &buf[..k] {
                s += v;
                selected.push(ch);
            }
            map[[i, j]] = s / T::of(k as f64);
        }
    }
    Ok(TopK { map: SpatialMap(map), selected, k, channels: c })
}

/// Pixel-wise maximum across a group of maps of identical shape.
///
/// Returns [`Error::EmptyGroup`] when the group is empty so the caller can
/// apply its own empty-group rule.
pub fn cross_model_max<'a, T, I>(maps: I) -> Result<SpatialMap<T>>
where
    T: Real,
    I: IntoIterator<Item = &'a SpatialMap<T>>,
{
    let mut it = maps.into_iter();
    let first = it.next().ok_or(Error::EmptyGroup)?;
    let mut out = first.0.clone();
    for m in it {
        if m.dim() != out.dim() {
            return Err(Error::Shape(format!(
                "cross-model max over maps {:?} and {:?}",
                out.dim(),
                m.dim()
            )));
        }
        ndarray::Zip::from(&mut out).and(&m.0).for_each(|o, &v| {
            if v > *o {
                *o = v;
            }
        });
    }
    Ok(SpatialMap(out))
}

/// Cross-channel attention of a block: the mean over all channels of the
/// in-channel attention (top-k with `k = C`). Sums to one over the grid.
pub fn block_attention<T: Real>(x: ArrayView3<'_, T>) -> Result<SpatialMap<T>> {
    block_attention_cached(x).map(|(_, m)| m)
}

/// [`block_attention`] that also returns the in-channel attention needed by
/// [`block_attention_backward`].
pub fn block_attention_cached<T: Real>(
    x: ArrayView3<'_, T>,
) -> Result<(InChannelAttention<T>, SpatialMap<T>)> {
    let attn = spatial_softmax(x)?;
    let map = channel_mean(attn.values());
    Ok((attn, SpatialMap(map)))
}

fn channel_mean<T: Real>(a: ArrayView3<'_, T>) -> Array2<T> {
    let c = T::of(a.len_of(Axis(0)) as f64);
    let mut sum = Array2::zeros((a.dim().1, a.dim().2));
    for ch in a.outer_iter() {
        sum += &ch;
    }
    sum.mapv_inplace(|v| v / c);
    sum
}

/// `dL/dx` for [`block_attention`] given `dL/dmap`.
pub fn block_attention_backward<T: Real>(
    attn: &InChannelAttention<T>,
    grad: ArrayView2<'_, T>,
) -> Array3<T> {
    let c = attn.dim().0;
    let g = grad.mapv(|v| v / T::of(c as f64));
    let g3 = g.broadcast(attn.0.raw_dim()).expect("same spatial grid");
    spatial_softmax_backward(attn.values(), g3)
}

/// Batched [`block_attention_cached`] over the leading axis of `N x C x H x W`.
pub fn block_attention_batch<T: Real>(
    x: ArrayView4<'_, T>,
) -> Result<Vec<(InChannelAttention<T>, SpatialMap<T>)>> {
    par::map_range(x.len_of(Axis(0)), |n| block_attention_cached(x.index_axis(Axis(0), n)))
        .into_iter()
        .collect()
}
