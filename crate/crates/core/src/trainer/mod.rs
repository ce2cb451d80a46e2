//! Two-stage training: domain-specific models first, then the aggregated
//! model regularised against them.
//!
//! Stage 1 trains one model per source domain with classification loss plus
//! the weighted intra-model term. Stage 2 trains a fresh model on the union of
//! the sources with all four terms; the stage-1 models only run inference.

mod augment;
mod config;
mod optim;

pub use augment::Augment;
pub use config::{Precision, Preset, TrainConfig};
pub use optim::{cosine_lr, Sgd};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array4, Axis};
use serde::Serialize;

use crate::attention_ops::{block_attention_backward, block_attention_batch};
use crate::backbone::{predict, Backbone};
use crate::datagen::{to_tensor, DomainDataset, Sample};
use crate::inter_adr::{sample_inter, AttentionProfile};
use crate::intra_adr::{IntraLoss, SceBlock};
use crate::nn::{cross_entropy, Params};
use crate::{par, rng, Error, Real, Result};

/// Stage keys for the random streams.
const STAGE_SPECIFIC: u64 = 1;
const STAGE_AGGREGATED: u64 = 2;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
    pub total: f64,
    pub cls: f64,
    pub intra: Option<f64>,
    pub dir: Option<f64>,
    pub dvr: Option<f64>,
    pub lr: f64,
}

/// Per-batch loss decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchLoss {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub cls: f64,
    pub intra: f64,
    pub dir: f64,
    pub dvr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub epochs: Vec<EpochMetrics>,
    pub batches: Vec<BatchLoss>,
}

impl RunLog {
    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_batches(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.batches {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Output of a training stage: the best-by-validation model and its log.
#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub model: Backbone<T>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: RunLog,
}

/// Accuracy (percent) and mean cross-entropy of `model` in inference mode.
pub fn evaluate<T: Real>(model: &Backbone<T>, samples: &[&Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty split".into()));
    }
    let size = model.config().input_size;
    let (mut hits, mut loss) = (0usize, 0.0);
    for chunk in samples.chunks(128) {
        let x: Array4<T> = to_tensor(&chunk.iter().map(|s| s.image.as_slice()).collect::<Vec<_>>(), size);
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let logits = model.forward_with_taps(x.view())?.logits;
        let (l, _) = cross_entropy(logits.view(), &labels)?;
        loss += l.f64() * chunk.len() as f64;
        hits += predict(logits.view()).iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    let n = samples.len() as f64;
    Ok((100.0 * hits as f64 / n, loss / n))
}

/// Sample identity within a run plus the sample itself.
#[derive(Clone, Copy)]
struct Item<'a> {
    domain: usize,
    index: usize,
    sample: &'a Sample,
}

/// Shuffled visiting order of one domain's training split.
fn shuffled(n: usize, seed: u64, keys: &[u64]) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, keys));
    idx
}

/// Stage-1 order: one shuffled pass over the domain.
fn specific_order<'a>(data: &'a DomainDataset, seed: u64, epoch: usize) -> Vec<Item<'a>> {
    let keys = [rng::tag::SHUFFLE, STAGE_SPECIFIC, data.domain as u64, epoch as u64];
    shuffled(data.train.len(), seed, &keys)
        .into_iter()
        .map(|i| Item { domain: data.domain, index: i, sample: &data.train[i] })
        .collect()
}

/// Stage-2 order: domains are interleaved round-robin, so every batch holds
/// (nearly) equal shares of each source. Smaller domains are re-shuffled and
/// repeated until the largest one has been visited once.
fn balanced_order<'a>(sources: &[&'a DomainDataset], seed: u64, epoch: usize) -> Vec<Item<'a>> {
    let longest = sources.iter().map(|d| d.train.len()).max().unwrap_or(0);
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(sources.len());
    for d in sources {
        let n = d.train.len();
        let mut p = Vec::with_capacity(longest);
        let mut round = 0u64;
        while p.len() < longest {
            let keys = [rng::tag::SHUFFLE, STAGE_AGGREGATED, epoch as u64, d.domain as u64, round];
            p.extend(shuffled(n, seed, &keys));
            round += 1;
        }
        p.truncate(longest);
        perms.push(p);
    }
    let mut out = Vec::with_capacity(longest * sources.len());
    for pos in 0..longest {
        for (d, perm) in sources.iter().zip(&perms) {
            let i = perm[pos];
            out.push(Item { domain: d.domain, index: i, sample: &d.train[i] });
        }
    }
    out
}

/// Builds the (augmented) input tensor of a batch.
fn batch_tensor<T: Real>(items: &[Item<'_>], config: &TrainConfig, stage: u64, epoch: usize, first: usize) -> Array4<T> {
    let size = config.backbone.input_size;
    let images: Vec<Vec<u8>> = par::map_range(items.len(), |i| {
        let it = &items[i];
        if !config.augment.any() {
            return it.sample.image.clone();
        }
        let keys = [rng::tag::AUGMENT, stage, epoch as u64, (first + i) as u64, it.domain as u64, it.index as u64];
        config.augment.apply(&it.sample.image, size, &mut rng::stream(config.seed, &keys))
    });
    to_tensor(&images.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), size)
}

fn check_data(data: &DomainDataset, config: &TrainConfig) -> Result<()> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config(format!("domain {} has an empty train or val split", data.name)));
    }
    if data.size != config.backbone.input_size {
        return Err(Error::Config(format!(
            "domain {} has {}px images but the backbone expects {}px",
            data.name, data.size, config.backbone.input_size
        )));
    }
    if let Some(bad) = data.split(crate::datagen::Split::Train).iter().find(|s| s.label >= config.backbone.classes) {
        return Err(Error::Config(format!("label {} exceeds the configured {} classes", bad.label, config.backbone.classes)));
    }
    Ok(())
}

/// Mutable state of one training run.
struct Fit<'a, T: Real> {
    config: &'a TrainConfig,
    model: Backbone<T>,
    sce: Option<SceBlock<T>>,
    opt: Sgd<T>,
    sce_opt: Sgd<T>,
    frozen: Vec<&'a Backbone<T>>,
    stage: u64,
    log: RunLog,
}

struct StepOut {
    loss: BatchLoss,
    correct: usize,
}

impl<T: Real> Fit<'_, T> {
    fn step(&mut self, items: &[Item<'_>], epoch: usize, batch: usize, first: usize, lr: f64) -> Result<StepOut> {
        let cfg = self.config;
        let x: Array4<T> = batch_tensor(items, cfg, self.stage, epoch, first);
        let labels: Vec<usize> = items.iter().map(|it| it.sample.label).collect();
        let n = items.len();
        let (fwd, cache) = self.model.forward_train(x.view())?;
        let (cls, dlogits) = cross_entropy(fwd.logits.view(), &labels)?;
        let preds = predict(fwd.logits.view());
        let blocks = self.model.blocks.len();
        let mut tap_grads: Vec<Option<Array4<T>>> = vec![None; blocks];

        let (mut intra, mut sce_grads) = (T::zero(), None);
        if let Some(sce) = &self.sce {
            let il = IntraLoss::forward(fwd.taps[blocks - 1].view(), sce, cfg.topk)?;
            intra = il.value;
            let (dx, g) = il.backward(sce, T::of(cfg.lambda_intra));
            tap_grads[blocks - 1] = Some(dx);
            sce_grads = Some(g);
        }

        let (mut dir, mut dvr) = (T::zero(), T::zero());
        if cfg.uses_inter() {
            let chosen = cfg.inter_block_indices();
            let agg: Vec<_> = chosen.iter().map(|&b| block_attention_batch(fwd.taps[b].view())).collect::<Result<_>>()?;
            let mut others = Vec::with_capacity(self.frozen.len());
            for m in &self.frozen {
                let f = m.forward_with_taps(x.view())?;
                let maps: Vec<_> = chosen.iter().map(|&b| block_attention_batch(f.taps[b].view())).collect::<Result<_>>()?;
                others.push((predict(f.logits.view()), maps));
            }
            let (ld, lv) = (T::of(cfg.lambda_dir), T::of(cfg.lambda_dvr));
            let inv_n = T::one() / T::of(n as f64);
            let per_sample = par::map_range(n, |i| -> Result<_> {
                let mut profiles = Vec::with_capacity(others.len() + 1);
                profiles.push(AttentionProfile::new(0, preds[i], agg.iter().map(|b| b[i].1.clone()).collect())?);
                for (j, (p, maps)) in others.iter().enumerate() {
                    profiles.push(AttentionProfile::new(j + 1, p[i], maps.iter().map(|b| b[i].1.clone()).collect())?);
                }
                let s = sample_inter(&profiles, labels[i], ld, lv)?;
                let dfeat: Vec<_> = s
                    .grads
                    .iter()
                    .zip(&agg)
                    .map(|(g, b)| block_attention_backward(&b[i].0, g.mapv(|v| v * inv_n).view()))
                    .collect();
                Ok((s.dir, s.dvr, dfeat))
            });
            for (k, &b) in chosen.iter().enumerate() {
                let mut acc = tap_grads[b].take().unwrap_or_else(|| Array4::zeros(fwd.taps[b].raw_dim()));
                for (i, r) in per_sample.iter().enumerate() {
                    let (_, _, dfeat) = r.as_ref().map_err(|e| Error::Param(e.to_string()))?;
                    let mut slot = acc.index_axis_mut(Axis(0), i);
                    slot += &dfeat[k];
                }
                tap_grads[b] = Some(acc);
            }
            for r in per_sample {
                let (d, v, _) = r?;
                dir += d;
                dvr += v;
            }
            dir *= inv_n;
            dvr *= inv_n;
        }

        let total = cls + T::of(cfg.lambda_intra) * intra + T::of(cfg.lambda_dir) * dir + T::of(cfg.lambda_dvr) * dvr;
        if !total.is_finite() {
            return Err(Error::NonFinite { index: vec![epoch, batch] });
        }
        let grads = self.model.backward(&cache, dlogits.view(), &tap_grads);
        self.opt.step(self.model.params_mut(), &grads, lr);
        if let (Some(sce), Some(g)) = (self.sce.as_mut(), sce_grads) {
            self.sce_opt.step(sce.params_mut(), &g, lr);
        }
        let loss = BatchLoss { epoch, batch, total: total.f64(), cls: cls.f64(), intra: intra.f64(), dir: dir.f64(), dvr: dvr.f64() };
        let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        Ok(StepOut { loss, correct })
    }

    fn run<'d>(mut self, order: impl Fn(usize) -> Vec<Item<'d>>, val: &[&Sample]) -> Result<Trained<T>> {
        let cfg = self.config;
        let mut best: Option<(f64, f64, usize, Backbone<T>)> = None;
        for epoch in 0..cfg.epochs {
            let lr = cosine_lr(cfg.base_lr, epoch, cfg.epochs);
            let items = order(epoch);
            let mut sums = [0.0f64; 5];
            let (mut seen, mut correct, mut batches) = (0usize, 0usize, 0usize);
            for (b, chunk) in items.chunks(cfg.batch_size).enumerate() {
                // a single-sample batch has no batch statistics
                if chunk.len() < 2 {
                    continue;
                }
                let out = self.step(chunk, epoch, b, b * cfg.batch_size, lr)?;
                let l = out.loss;
                for (s, v) in sums.iter_mut().zip([l.total, l.cls, l.intra, l.dir, l.dvr]) {
                    *s += v;
                }
                seen += chunk.len();
                correct += out.correct;
                batches += 1;
                self.log.batches.push(l);
            }
            let m = |i: usize| sums[i] / batches.max(1) as f64;
            let opt = |on: bool, i: usize| on.then(|| m(i));
            self.log.epochs.push(EpochMetrics {
                epoch,
                split: "train".into(),
                accuracy: 100.0 * correct as f64 / seen.max(1) as f64,
                total: m(0),
                cls: m(1),
                intra: opt(self.sce.is_some(), 2),
                dir: opt(cfg.uses_inter(), 3),
                dvr: opt(cfg.uses_inter(), 4),
                lr,
            });
            let (acc, loss) = evaluate(&self.model, val)?;
            self.log.epochs.push(EpochMetrics {
                epoch,
                split: "val".into(),
                accuracy: acc,
                total: loss,
                cls: loss,
                intra: None,
                dir: None,
                dvr: None,
                lr,
            });
            log::info!("epoch {epoch}: train acc {:.1} loss {:.4}, val acc {acc:.1}", 100.0 * correct as f64 / seen.max(1) as f64, m(0));
            let better = match &best {
                None => true,
                Some((a, l, _, _)) => acc > *a || (acc == *a && loss < *l),
            };
            if better {
                best = Some((acc, loss, epoch, self.model.clone()));
            }
        }
        let (best_val_accuracy, _, best_epoch, model) = match best {
            Some(b) => b,
            None => {
                let (a, l) = evaluate(&self.model, val)?;
                (a, l, 0, self.model)
            }
        };
        Ok(Trained { model, best_epoch, best_val_accuracy, log: self.log })
    }
}

fn new_fit<'a, T: Real>(config: &'a TrainConfig, stage: u64, domain: u64, frozen: Vec<&'a Backbone<T>>) -> Result<Fit<'a, T>> {
    let model = Backbone::new(config.backbone.clone(), &mut rng::stream(config.seed, &[rng::tag::BACKBONE_INIT, stage, domain]))?;
    let sce = if config.uses_intra() {
        let channels = *config.backbone.channels.last().expect("validated");
        Some(SceBlock::new(channels, config.sce(), &mut rng::stream(config.seed, &[rng::tag::SCE_INIT, stage, domain]))?)
    } else {
        None
    };
    Ok(Fit {
        config,
        model,
        sce,
        opt: Sgd::new(config.momentum, config.weight_decay),
        sce_opt: Sgd::new(config.momentum, config.weight_decay),
        frozen,
        stage,
        log: RunLog::default(),
    })
}

/// Stage 1: trains the domain-specific model of one domain on its own data
/// and selects the epoch with the best own-domain validation accuracy.
pub fn train_specific<T: Real>(data: &DomainDataset, config: &TrainConfig) -> Result<Trained<T>> {
    config.validate()?;
    check_data(data, config)?;
    let fit = new_fit(config, STAGE_SPECIFIC, data.domain as u64, Vec::new())?;
    let val: Vec<&Sample> = data.val.iter().collect();
    fit.run(|e| specific_order(data, config.seed, e), &val)
}

/// Stage 1 for every source domain.
pub fn train_stage1<T: Real>(sources: &[&DomainDataset], config: &TrainConfig) -> Result<Vec<Trained<T>>> {
    if sources.is_empty() {
        return Err(Error::Config("stage 1 needs at least one domain".into()));
    }
    sources.iter().map(|d| train_specific(d, config)).collect()
}

/// Stage 2: trains the aggregated model on the union of `sources`.
/// `specific` maps each source domain id to its frozen stage-1 model and is
/// only consulted when an inter-model weight is non-zero.
pub fn train_aggregated<T: Real>(
    sources: &[&DomainDataset],
    specific: &BTreeMap<usize, Backbone<T>>,
    config: &TrainConfig,
) -> Result<Trained<T>> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::Config("stage 2 needs at least one source domain".into()));
    }
    for d in sources {
        check_data(d, config)?;
    }
    let mut frozen = Vec::new();
    if config.uses_inter() {
        if sources.len() < 2 {
            return Err(Error::Config("the inter-model terms need at least 2 source domains".into()));
        }
        let missing: Vec<String> = sources.iter().filter(|d| !specific.contains_key(&d.domain)).map(|d| d.name.clone()).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("no domain-specific model for domain(s) {}", missing.join(", "))));
        }
        for d in sources {
            let m = &specific[&d.domain];
            if *m.config() != config.backbone {
                return Err(Error::Config(format!(
                    "domain-specific model for {} is incompatible with the aggregated backbone configuration",
                    d.name
                )));
            }
            frozen.push(m);
        }
    }
    let fit = new_fit(config, STAGE_AGGREGATED, 0, frozen)?;
    let val: Vec<&Sample> = sources.iter().flat_map(|d| d.val.iter()).collect();
    fit.run(|e| balanced_order(sources, config.seed, e), &val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, BenchmarkConfig};

    fn tiny() -> (Vec<DomainDataset>, TrainConfig) {
        let data = generate(&BenchmarkConfig { seed: 1, domains: 3, per_domain: 28, classes: 7, image_size: 16, shortcut: 0.9 }).unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.backbone.channels = vec![4, 8, 16];
        cfg.backbone.input_size = 16;
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.topk = 4;
        (data, cfg)
    }

    #[test]
    fn balanced_order_interleaves_domains() {
        let (data, _) = tiny();
        let refs: Vec<&DomainDataset> = data.iter().collect();
        let order = balanced_order(&refs, 3, 0);
        assert_eq!(order.len(), 3 * data[0].train.len());
        for (i, it) in order.iter().enumerate() {
            assert_eq!(it.domain, i % 3);
        }
    }

    /// Minimal ERM loop: same order, augmentation and optimizer, no
    /// regularizer code at all. Returns the parameters after every epoch.
    fn plain_erm(sources: &[&DomainDataset], cfg: &TrainConfig) -> Vec<Backbone<f64>> {
        let mut model = Backbone::<f64>::new(
            cfg.backbone.clone(),
            &mut rng::stream(cfg.seed, &[rng::tag::BACKBONE_INIT, STAGE_AGGREGATED, 0]),
        )
        .unwrap();
        let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        let mut snapshots = Vec::new();
        for epoch in 0..cfg.epochs {
            let lr = cosine_lr(cfg.base_lr, epoch, cfg.epochs);
            let items = balanced_order(sources, cfg.seed, epoch);
            for (b, chunk) in items.chunks(cfg.batch_size).enumerate() {
                if chunk.len() < 2 {
                    continue;
                }
                let x: Array4<f64> = batch_tensor(chunk, cfg, STAGE_AGGREGATED, epoch, b * cfg.batch_size);
                let labels: Vec<usize> = chunk.iter().map(|it| it.sample.label).collect();
                let (fwd, cache) = model.forward_train(x.view()).unwrap();
                let (_, dlogits) = cross_entropy(fwd.logits.view(), &labels).unwrap();
                let grads = model.backward(&cache, dlogits.view(), &[]);
                opt.step(model.params_mut(), &grads, lr);
            }
            snapshots.push(model.clone());
        }
        snapshots
    }

    #[test]
    fn zero_lambdas_follow_the_plain_erm_trajectory() {
        let (data, mut cfg) = tiny();
        cfg.lambda_intra = 0.0;
        cfg.lambda_dir = 0.0;
        cfg.lambda_dvr = 0.0;
        cfg.precision = Precision::F64;
        let refs: Vec<&DomainDataset> = data.iter().collect();
        let trained = train_aggregated::<f64>(&refs, &BTreeMap::new(), &cfg).unwrap();
        let plain = plain_erm(&refs, &cfg);
        let expect = &plain[trained.best_epoch];
        for (a, b) in trained.model.params().iter().zip(expect.params()) {
            assert_eq!(a, &b);
        }
        for (a, b) in trained.model.buffers().iter().zip(expect.buffers()) {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn stage_two_logs_a_consistent_decomposition() {
        let (data, cfg) = tiny();
        let refs: Vec<&DomainDataset> = data.iter().collect();
        let spec: BTreeMap<usize, Backbone<f64>> =
            train_stage1::<f64>(&refs, &cfg).unwrap().into_iter().enumerate().map(|(d, t)| (d, t.model)).collect();
        let agg = train_aggregated(&refs, &spec, &cfg).unwrap();
        assert!(!agg.log.batches.is_empty());
        for b in &agg.log.batches {
            let sum = b.cls + cfg.lambda_intra * b.intra + cfg.lambda_dir * b.dir + cfg.lambda_dvr * b.dvr;
            assert!((b.total - sum).abs() <= 1e-6, "{b:?}");
            assert!(b.dir >= 0.0 && b.dvr <= 0.0 && b.intra < 0.0);
        }
    }

    #[test]
    fn missing_specific_model_names_domain() {
        let (data, cfg) = tiny();
        let refs: Vec<&DomainDataset> = data.iter().collect();
        let mut spec = BTreeMap::new();
        spec.insert(0, Backbone::<f64>::new(cfg.backbone.clone(), &mut rng::stream(0, &[])).unwrap());
        let err = train_aggregated(&refs, &spec, &cfg).unwrap_err().to_string();
        assert!(err.contains("d1") && err.contains("d2"), "{err}");
    }

    #[test]
    fn empty_domain_is_a_config_error() {
        let (mut data, cfg) = tiny();
        data[0].train.clear();
        assert!(matches!(train_specific::<f32>(&data[0], &cfg), Err(Error::Config(_))));
    }
}
