//! Hot kernels under the current build. Run once with default features and
//! once with `--no-default-features`; the group name records which backend
//! produced the numbers so both land side by side in the report.

use attdiv::attention_ops::block_attention_batch;
use attdiv::backbone::Backbone;
use attdiv::intra_adr::{IntraLoss, SceBlock, SceConfig};
use attdiv::nn::cross_entropy;
use attdiv::par;
use attdiv::trainer::TrainConfig;
use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn backend() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = TrainConfig::desk();
    let size = cfg.backbone.input_size;
    let batch = cfg.batch_size;
    let mut model = Backbone::<f32>::new(cfg.backbone.clone(), &mut rng).unwrap();
    let x = random4(&mut rng, (batch, 3, size, size));
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.backbone.classes).collect();
    let last = *cfg.backbone.channels.last().unwrap();
    let sce = SceBlock::<f32>::new(last, SceConfig { topk: cfg.topk, ..SceConfig::default() }, &mut rng).unwrap();
    let taps = model.forward_with_taps(x.view()).unwrap().taps;

    let mut g = c.benchmark_group(backend());
    g.sample_size(20);
    g.bench_function("forward_eval", |b| b.iter(|| black_box(model.forward_with_taps(x.view()).unwrap())));
    g.bench_function("train_step_erm", |b| {
        b.iter(|| {
            let (fwd, cache) = model.forward_train(x.view()).unwrap();
            let (_, d) = cross_entropy(fwd.logits.view(), &labels).unwrap();
            black_box(model.backward(&cache, d.view(), &[]))
        })
    });
    g.bench_function("block_attention_block1", |b| b.iter(|| black_box(block_attention_batch(taps[0].view()).unwrap())));
    g.bench_function("intra_loss_fwd_bwd", |b| {
        let last = taps.last().unwrap();
        b.iter(|| {
            let l = IntraLoss::forward(last.view(), &sce, cfg.topk).unwrap();
            black_box(l.backward(&sce, 0.005))
        })
    });
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
