//! Spatial-channel joint expanding (SCE) and the intra-model attention loss.
//!
//! The last block's features are upsampled by a learnable transposed
//! convolution (followed by instance norm and ReLU), turned into per-channel
//! spatial distributions, reduced pixel-wise by the mean of the top-k
//! channels, and the loss is minus the spatial mean of that map.

use ndarray::{Array2, Array3, Array4, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention_ops::{self, FeatureBlock, TopK};
use crate::nn::{self, ConvTranspose2d, ConvTransposeCache, Geometry, Grads, InstanceNorm2d, InstanceNormCache, Params};
use crate::{par, Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceInit {
    He,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceConfig {
    /// Spatial scale factor `s >= 1`.
    pub scale: usize,
    /// Channels averaged per pixel.
    pub topk: usize,
    /// Overrides the default `2s` (even `s`) / `2s - 1` (odd `s`) kernel.
    pub kernel: Option<usize>,
    pub padding: Option<usize>,
    pub init: SceInit,
    pub instance_norm: bool,
}

impl Default for SceConfig {
    fn default() -> Self {
        Self { scale: 2, topk: 10, kernel: None, padding: None, init: SceInit::He, instance_norm: true }
    }
}

impl SceConfig {
    pub fn geometry(&self) -> Geometry {
        let s = self.scale;
        let (k, p) = if s % 2 == 0 { (2 * s, s / 2) } else { (2 * s - 1, (s - 1) / 2) };
        Geometry { kernel: self.kernel.unwrap_or(k), stride: s, padding: self.padding.unwrap_or(p) }
    }

    /// Checks the geometry upsamples by exactly `s` and that `k` fits.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::Config("SCE scale factor must be >= 1".into()));
        }
        if self.topk == 0 || self.topk > channels {
            return Err(Error::Config(format!(
                "SCE top-k must be in 1..={channels} for a {channels}-channel block, got {}",
                self.topk
            )));
        }
        let g = self.geometry();
        if g.kernel < 2 * g.padding || g.kernel - 2 * g.padding != self.scale {
            return Err(Error::Config(format!(
                "deconv kernel {} / padding {} does not upsample by exactly {}",
                g.kernel, g.padding, self.scale
            )));
        }
        Ok(())
    }
}

/// Transposed convolution -> instance norm -> ReLU.
#[derive(Debug, Clone)]
pub struct SceBlock<T> {
    pub deconv: ConvTranspose2d<T>,
    pub norm: InstanceNorm2d<T>,
    config: SceConfig,
}

pub struct SceCache<T> {
    deconv: ConvTransposeCache<T>,
    norm: InstanceNormCache<T>,
    out: Array4<T>,
}

impl<T: Real> SceBlock<T> {
    pub fn new<R: Rng>(channels: usize, config: SceConfig, rng: &mut R) -> Result<Self> {
        config.validate(channels)?;
        let g = config.geometry();
        let deconv = match config.init {
            SceInit::He => ConvTranspose2d::new(channels, channels, g, rng),
            SceInit::Bilinear => ConvTranspose2d::bilinear(channels, g),
        };
        let mut norm = InstanceNorm2d::new(channels);
        norm.enabled = config.instance_norm;
        Ok(Self { deconv, norm, config })
    }

    /// Scale 1, identity 1x1 deconvolution, instance norm disabled: the
    /// block reduces to a ReLU.
    pub fn identity(channels: usize, topk: usize) -> Self {
        let config = SceConfig {
            scale: 1,
            topk,
            kernel: Some(1),
            padding: Some(0),
            init: SceInit::Bilinear,
            instance_norm: false,
        };
        let g = config.geometry();
        let mut deconv = ConvTranspose2d::bilinear(channels, g);
        deconv.weight = Array2::eye(channels);
        let mut norm = InstanceNorm2d::new(channels);
        norm.enabled = false;
        Self { deconv, norm, config }
    }

    pub fn config(&self) -> &SceConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.deconv.in_channels()
    }

    pub fn forward(&self, x: ArrayView4<'_, T>) -> Result<(Array4<T>, SceCache<T>)> {
        let (up, deconv) = self.deconv.forward(x)?;
        let (mut out, norm) = self.norm.forward(up.view());
        nn::relu_inplace(&mut out);
        Ok((out.clone(), SceCache { deconv, norm, out }))
    }

    pub fn backward(&self, cache: &SceCache<T>, dy: ArrayView4<'_, T>) -> (Array4<T>, Grads<T>) {
        let mut d = dy.to_owned();
        nn::relu_backward_inplace(&mut d, cache.out.view());
        let (d, g_norm) = self.norm.backward(&cache.norm, d.view());
        let (dx, mut grads) = self.deconv.backward(&cache.deconv, d.view());
        grads.extend(g_norm);
        (dx, grads)
    }
}

impl<T: Real> Params<T> for SceBlock<T> {
    fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut p = self.deconv.params();
        p.extend(self.norm.params());
        p
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut p = self.deconv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}

/// Upsamples one sample's last-block features through the SCE block.
pub fn spatial_expand<T: Real>(x: &FeatureBlock<T>, sce: &SceBlock<T>) -> Result<FeatureBlock<T>> {
    let (c, h, w) = x.dim();
    if c != sce.channels() {
        return Err(Error::Config(format!(
            "SCE block built for {} channels, features have {c}",
            sce.channels()
        )));
    }
    let batch = x.values().to_owned().into_shape_with_order((1, c, h, w)).expect("sized");
    let (out, _) = sce.forward(batch.view())?;
    let out = out.index_axis_move(Axis(0), 0);
    FeatureBlock::new(out, x.block())
}

/// Intra-model loss of a single sample.
pub fn intra_loss<T: Real>(x: &FeatureBlock<T>, sce: &SceBlock<T>, k: usize) -> Result<T> {
    let (c, h, w) = x.dim();
    let batch = x.values().to_owned().into_shape_with_order((1, c, h, w)).expect("sized");
    Ok(IntraLoss::forward(batch.view(), sce, k)?.value)
}

/// Batch intra-model loss (mean over samples) with the state needed for
/// backpropagation.
pub struct IntraLoss<T> {
    pub value: T,
    per_sample: Vec<(Array3<T>, TopK<T>)>,
    sce: SceCache<T>,
}

impl<T: Real> IntraLoss<T> {
    pub fn forward(x: ArrayView4<'_, T>, sce: &SceBlock<T>, k: usize) -> Result<Self> {
        let c = x.len_of(Axis(1));
        if c != sce.channels() {
            return Err(Error::Config(format!(
                "SCE block built for {} channels, features have {c}",
                sce.channels()
            )));
        }
        if k == 0 || k > c {
            return Err(Error::Param(format!("top-k requires 1 <= k <= {c}, got {k}")));
        }
        attention_ops::check_finite(&x)?;
        let (expanded, cache) = sce.forward(x)?;
        let n = expanded.len_of(Axis(0));
        let per_sample: Vec<Result<(Array3<T>, TopK<T>)>> = par::map_range(n, |i| {
            let attn = attention_ops::softmax_unchecked(expanded.index_axis(Axis(0), i));
            let sel = attention_ops::topk_select(attn.view(), k)?;
            Ok((attn, sel))
        });
        let per_sample = per_sample.into_iter().collect::<Result<Vec<_>>>()?;
        let total: T = per_sample
            .iter()
            .map(|(_, sel)| -sel.map().values().mean().expect("nonempty"))
            .fold(T::zero(), |a, b| a + b);
        let value = total / T::of(n as f64);
        Ok(Self { value, per_sample, sce: cache })
    }

    /// Gradient of `scale * value` w.r.t. the input features and the SCE
    /// parameters.
    pub fn backward(&self, sce: &SceBlock<T>, scale: T) -> (Array4<T>, Grads<T>) {
        let n = self.per_sample.len();
        let (c, h, w) = self.per_sample[0].0.dim();
        let g = -scale / T::of((n * h * w) as f64);
        let dmap = Array2::from_elem((h, w), g);
        let grads: Vec<Array3<T>> = par::map_range(n, |i| {
            let (attn, sel) = &self.per_sample[i];
            let dattn = sel.backward(dmap.view());
            attention_ops::spatial_softmax_backward(attn.view(), dattn.view())
        });
        let mut dexp = Array4::zeros((n, c, h, w));
        for (mut slot, g) in dexp.outer_iter_mut().zip(grads) {
            slot.assign(&g);
        }
        sce.backward(&self.sce, dexp.view())
    }
}
