//! A small plain CNN with one feature tap per block.
//!
//! Block = conv3x3 -> batch-norm -> ReLU -> conv3x3 -> ReLU -> 2x2 average
//! pool. The head is global average pooling followed by a linear layer.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, BatchNorm2d, BatchNormCache, Conv2d, ConvCache, Grads, Linear, Params};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each block; its length is the number of blocks.
    pub channels: Vec<usize>,
    /// Square input resolution.
    pub input_size: usize,
    pub in_channels: usize,
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { channels: vec![16, 32, 64, 128], input_size: 64, in_channels: 3, classes: 7 }
    }
}

impl BackboneConfig {
    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("invalid block channels {:?}", self.channels)));
        }
        if self.classes < 2 || self.in_channels == 0 {
            return Err(Error::Config("need >= 2 classes and >= 1 input channel".into()));
        }
        let div = 1usize << self.blocks();
        if self.input_size % div != 0 || self.input_size / div < 2 {
            return Err(Error::Config(format!(
                "input size {} must be a multiple of {div} with a final resolution of at least 2x2",
                self.input_size
            )));
        }
        Ok(())
    }

    /// `(C, H, W)` of every block output.
    pub fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.channels
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                let s = self.input_size >> (b + 1);
                (c, s, s)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
}

struct BlockCache<T> {
    conv1: ConvCache<T>,
    bn: BatchNormCache<T>,
    relu1: Array4<T>,
    conv2: ConvCache<T>,
    relu2: Array4<T>,
}

impl<T: Real> ConvBlock<T> {
    fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::same3x3(inputs, outputs, rng),
            bn: BatchNorm2d::new(outputs),
            conv2: Conv2d::same3x3(outputs, outputs, rng),
        }
    }

    fn forward_train(&mut self, x: ArrayView4<'_, T>) -> Result<(Array4<T>, BlockCache<T>)> {
        let (h, c1) = self.conv1.forward(x)?;
        let (mut h, bn) = self.bn.forward_train(h.view());
        nn::relu_inplace(&mut h);
        let (mut h2, c2) = self.conv2.forward(h.view())?;
        nn::relu_inplace(&mut h2);
        let out = nn::avg_pool2(h2.view())?;
        Ok((out, BlockCache { conv1: c1, bn, relu1: h, conv2: c2, relu2: h2 }))
    }

    fn forward_eval(&self, x: ArrayView4<'_, T>) -> Result<Array4<T>> {
        let h = self.conv1.forward_eval(x)?;
        let mut h = self.bn.forward_eval(h.view());
        nn::relu_inplace(&mut h);
        let mut h = self.conv2.forward_eval(h.view())?;
        nn::relu_inplace(&mut h);
        nn::avg_pool2(h.view())
    }

    fn backward(&self, cache: &BlockCache<T>, dout: ArrayView4<'_, T>) -> (Array4<T>, Grads<T>) {
        let mut d = nn::avg_pool2_backward(dout);
        nn::relu_backward_inplace(&mut d, cache.relu2.view());
        let (mut d, g_conv2) = self.conv2.backward(&cache.conv2, d.view());
        nn::relu_backward_inplace(&mut d, cache.relu1.view());
        let (d, g_bn) = self.bn.backward(&cache.bn, d.view());
        let (dx, g_conv1) = self.conv1.backward(&cache.conv1, d.view());
        let mut grads = g_conv1;
        grads.extend(g_bn);
        grads.extend(g_conv2);
        (dx, grads)
    }
}

impl<T: Real> Params<T> for ConvBlock<T> {
    fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut p = self.conv1.params();
        p.extend(self.bn.params());
        p.extend(self.conv2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn.params_mut());
        p.extend(self.conv2.params_mut());
        p
    }

    fn buffers(&self) -> Vec<ArrayViewD<'_, T>> {
        self.bn.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        self.bn.buffers_mut()
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    config: BackboneConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub head: Linear<T>,
}

/// Logits and per-block feature maps of a batch.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub logits: Array2<T>,
    /// One `N x C^b x H^b x W^b` tensor per block, block 1 first.
    pub taps: Vec<Array4<T>>,
}

/// Everything the backward pass needs from a training-mode forward.
pub struct BackboneCache<T> {
    blocks: Vec<BlockCache<T>>,
    pooled: Array2<T>,
    last_hw: (usize, usize),
}

impl<T: Real> Backbone<T> {
    /// He-initialised network; the final linear bias starts at zero.
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.blocks());
        let mut inputs = config.in_channels;
        for &c in &config.channels {
            blocks.push(ConvBlock::new(inputs, c, rng));
            inputs = c;
        }
        let head = Linear::new(inputs, config.classes, rng);
        Ok(Self { config, blocks, head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn check_input(&self, x: &ArrayView4<'_, T>) -> Result<()> {
        let c = &self.config;
        let (_, ch, h, w) = x.dim();
        if ch != c.in_channels || h != c.input_size || w != c.input_size {
            return Err(Error::Shape(format!(
                "expected N x {} x {} x {} images, got {:?}",
                c.in_channels,
                c.input_size,
                c.input_size,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training-mode forward (batch statistics, running stats updated).
    pub fn forward_train(&mut self, x: ArrayView4<'_, T>) -> Result<(Forward<T>, BackboneCache<T>)> {
        self.check_input(&x)?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.to_owned();
        for block in &mut self.blocks {
            let (out, cache) = block.forward_train(h.view())?;
            caches.push(cache);
            taps.push(out.clone());
            h = out;
        }
        let (_, _, lh, lw) = h.dim();
        let pooled = nn::global_avg_pool(h.view());
        let logits = self.head.forward(pooled.view());
        Ok((Forward { logits, taps }, BackboneCache { blocks: caches, pooled, last_hw: (lh, lw) }))
    }

    /// Deterministic inference-mode forward with feature taps.
    pub fn forward_with_taps(&self, x: ArrayView4<'_, T>) -> Result<Forward<T>> {
        self.check_input(&x)?;
        let mut taps: Vec<Array4<T>> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = taps.last().map(|t| t.view()).unwrap_or(x);
            let out = block.forward_eval(input)?;
            taps.push(out);
        }
        let last = taps.last().expect("at least one block");
        let logits = self.head.forward(nn::global_avg_pool(last.view()).view());
        Ok(Forward { logits, taps })
    }

    pub fn predict(&self, x: ArrayView4<'_, T>) -> Result<Vec<usize>> {
        Ok(predict(self.forward_with_taps(x)?.logits.view()))
    }

    /// Backpropagates `dL/dlogits` plus optional extra gradients arriving at
    /// each block tap. Gradients come back in [`Params`] order.
    pub fn backward(
        &self,
        cache: &BackboneCache<T>,
        dlogits: ArrayView2<'_, T>,
        tap_grads: &[Option<Array4<T>>],
    ) -> Grads<T> {
        let (dpooled, head_grads) = self.head.backward(cache.pooled.view(), dlogits);
        let mut d = nn::global_avg_pool_backward(dpooled.view(), cache.last_hw);
        let mut per_block: Vec<Grads<T>> = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate().rev() {
            if let Some(Some(extra)) = tap_grads.get(b) {
                d += extra;
            }
            let (dx, g) = block.backward(&cache.blocks[b], d.view());
            per_block.push(g);
            d = dx;
        }
        let mut grads: Grads<T> = per_block.into_iter().rev().flatten().collect();
        grads.extend(head_grads);
        grads
    }

    /// Structural equality of parameter shapes.
    pub fn compatible_with(&self, other: &Backbone<T>) -> bool {
        self.config == other.config
    }
}

impl<T: Real> Params<T> for Backbone<T> {
    fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut p: Vec<_> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut p: Vec<_> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.head.params_mut());
        p
    }

    fn buffers(&self) -> Vec<ArrayViewD<'_, T>> {
        self.blocks.iter().flat_map(|b| b.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        self.blocks.iter_mut().flat_map(|b| b.buffers_mut()).collect()
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<T: Real>(logits: ArrayView2<'_, T>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// The aggregated model together with the domain-specific models.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    pub aggregated: Backbone<T>,
    pub specific: Vec<Backbone<T>>,
}

impl<T: Real> ModelBundle<T> {
    pub fn new(aggregated: Backbone<T>, specific: Vec<Backbone<T>>) -> Result<Self> {
        if let Some(j) = specific.iter().position(|m| !m.compatible_with(&aggregated)) {
            return Err(Error::Shape(format!(
                "domain-specific model {} has a different architecture from the aggregated model",
                j + 1
            )));
        }
        Ok(Self { aggregated, specific })
    }

    /// Number of domain-specific models.
    pub fn sources(&self) -> usize {
        self.specific.len()
    }

    pub fn config(&self) -> &BackboneConfig {
        self.aggregated.config()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, size: usize, seed: u64) -> Array4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((n, 3, size, size), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn default_tap_shapes() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.tap_shapes(), vec![(16, 32, 32), (32, 16, 16), (64, 8, 8), (128, 4, 4)]);
    }

    #[test]
    fn reported_taps_match_config_grid() {
        for (channels, size) in [(vec![4, 8], 8), (vec![2, 3, 5], 16), (vec![4, 4, 4, 4], 32)] {
            let cfg = BackboneConfig { channels, input_size: size, in_channels: 3, classes: 5 };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let m = Backbone::<f64>::new(cfg.clone(), &mut rng).unwrap();
            let f = m.forward_with_taps(images(3, size, 1).view()).unwrap();
            let got: Vec<_> = f.taps.iter().map(|t| (t.dim().1, t.dim().2, t.dim().3)).collect();
            assert_eq!(got, cfg.tap_shapes());
            assert_eq!(f.logits.dim(), (3, 5));
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = BackboneConfig { channels: vec![4, 8], input_size: 8, in_channels: 3, classes: 3 };
        let m = Backbone::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = images(2, 8, 2).mapv(|v| v as f32);
        let a = m.forward_with_taps(x.view()).unwrap();
        let b = m.forward_with_taps(x.view()).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.taps, b.taps);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let cfg = BackboneConfig { channels: vec![4, 8], input_size: 8, in_channels: 3, classes: 3 };
        let m = Backbone::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(matches!(m.forward_with_taps(images(1, 16, 0).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let bad = BackboneConfig { channels: vec![4, 4, 4, 4], input_size: 16, in_channels: 3, classes: 7 };
        assert!(bad.validate().is_err());
        assert!(BackboneConfig::default().validate().is_ok());
    }

    #[test]
    fn predict_cases() {
        assert_eq!(predict(array![[0.1, 0.9, 0.3]].view()), vec![1]);
        assert_eq!(predict(array![[0.5, 0.5]].view()), vec![0]);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let logits = Array::from_shape_fn((20, 6), |_| r.random_range(-3.0..3.0));
        for (row, p) in logits.outer_iter().zip(predict(logits.view())) {
            let oracle = (0..6).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            assert_eq!(p, oracle);
        }
    }

    #[test]
    fn initial_loss_near_log_classes() {
        let cfg = BackboneConfig { channels: vec![8, 16, 32, 64], input_size: 32, in_channels: 3, classes: 7 };
        let mut m = Backbone::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let x = images(64, 32, 12);
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let labels: Vec<usize> = (0..64).map(|_| r.random_range(0..7)).collect();
        let (f, _) = m.forward_train(x.view()).unwrap();
        let (loss, _) = nn::cross_entropy(f.logits.view(), &labels).unwrap();
        let ln7 = 7f64.ln();
        assert!((loss - ln7).abs() <= 0.1 * ln7, "initial loss {loss}");
    }

    #[test]
    fn bundle_rejects_mismatched_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Backbone::<f64>::new(BackboneConfig { channels: vec![4], input_size: 8, in_channels: 3, classes: 3 }, &mut rng).unwrap();
        let b = Backbone::<f64>::new(BackboneConfig { channels: vec![5], input_size: 8, in_channels: 3, classes: 3 }, &mut rng).unwrap();
        assert!(ModelBundle::new(a.clone(), vec![a.clone()]).is_ok());
        assert!(ModelBundle::new(a, vec![b]).is_err());
    }
}
