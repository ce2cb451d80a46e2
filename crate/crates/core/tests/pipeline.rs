use attdiv::attention_ops::block_attention;
use attdiv::backbone::{Backbone, BackboneConfig};
use attdiv::datagen::{self, cue_probe_accuracy, generate, BenchmarkConfig, DomainDataset, Sample};
use attdiv::evalviz::{export_attention, read_map_text, run_protocol, Method};
use attdiv::intra_adr::{IntraLoss, SceBlock};
use attdiv::trainer::{train_specific, Precision, TrainConfig};
use attdiv::nn::Params;
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench(shortcut: f64, seed: u64) -> Vec<DomainDataset> {
    generate(&BenchmarkConfig { seed, domains: 4, per_domain: 350, classes: 7, image_size: 32, shortcut }).unwrap()
}

fn corner(d: usize) -> usize {
    datagen::DomainSpec::recipe(d, 0.0, 7).unwrap().style.cue_corner
}

#[test]
fn cue_probe_tracks_the_shortcut_strength() {
    for (rho, check) in [(1.0, 0.95), (0.0, 1.0 / 7.0 + 0.05)] {
        let data = bench(rho, 2);
        for d in &data {
            let train: Vec<&Sample> = d.train.iter().collect();
            let test: Vec<&Sample> = d.test.iter().collect();
            let acc = cue_probe_accuracy(&train, &test, d.size, 7, corner);
            if rho == 1.0 {
                assert!(acc >= check, "rho 1, {}: {acc}", d.name);
            } else {
                assert!(acc <= check, "rho 0, {}: {acc}", d.name);
            }
        }
    }
}

#[test]
fn cue_probe_is_at_chance_on_a_held_out_domain() {
    let data = bench(0.9, 3);
    for held in 0..data.len() {
        let train: Vec<&Sample> = data.iter().filter(|d| d.domain != held).flat_map(|d| d.train.iter()).collect();
        let test: Vec<&Sample> = data[held].test.iter().collect();
        let acc = cue_probe_accuracy(&train, &test, 32, 7, corner);
        assert!(acc <= 1.0 / 7.0 + 0.05, "held-out {held}: {acc}");
    }
}

fn entropy(x: &Array3<f64>) -> f64 {
    let m = block_attention(x.view()).unwrap();
    -m.values().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

#[test]
fn one_intra_step_spreads_concentrated_attention() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (8, 5, 5);
        let mut x = Array4::from_shape_fn((1, c, h, w), |_| rng.random_range(0.0..0.1));
        let (pi, pj) = (rng.random_range(0..h), rng.random_range(0..w));
        for ch in 0..c {
            x[[0, ch, pi, pj]] = 4.0;
        }
        let sce = SceBlock::identity(c, 2);
        let loss = IntraLoss::forward(x.view(), &sce, 2).unwrap();
        let (dx, _) = loss.backward(&sce, 1.0);
        let stepped = &x - &(dx * 5.0);
        let before = entropy(&x.index_axis(Axis(0), 0).to_owned());
        let after = entropy(&stepped.index_axis(Axis(0), 0).mapv(|v| v.max(0.0)));
        assert!(after > before, "seed {seed}: {before} -> {after}");
    }
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.backbone.channels = vec![4, 8, 8];
    cfg.backbone.input_size = 16;
    cfg.topk = 4;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.precision = Precision::F64;
    cfg
}

#[test]
fn training_is_bit_reproducible_at_f64() {
    let data = generate(&BenchmarkConfig { seed: 9, domains: 1, per_domain: 40, classes: 7, image_size: 16, shortcut: 0.9 }).unwrap();
    let cfg = small_config();
    let a = train_specific::<f64>(&data[0], &cfg).unwrap();
    let b = train_specific::<f64>(&data[0], &cfg).unwrap();
    assert_eq!(a.best_val_accuracy, b.best_val_accuracy);
    for (p, q) in a.model.params().iter().zip(b.model.params()) {
        assert_eq!(p, &q);
    }
    let la: Vec<f64> = a.log.batches.iter().map(|l| l.total).collect();
    let lb: Vec<f64> = b.log.batches.iter().map(|l| l.total).collect();
    assert_eq!(la, lb);
}

#[test]
fn exported_maps_read_back() {
    let cfg = BackboneConfig { channels: vec![4, 8], input_size: 16, in_channels: 3, classes: 7 };
    let model = Backbone::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let data = generate(&BenchmarkConfig { seed: 1, domains: 1, per_domain: 10, classes: 7, image_size: 16, shortcut: 0.0 }).unwrap();
    let images: Vec<(String, Vec<u8>)> = data[0].test.iter().enumerate().map(|(i, s)| (format!("img{i}"), s.image.clone())).collect();
    let dir = tempfile::tempdir().unwrap();
    let maps = export_attention(&model, &images, &[1, 2], 0.0, dir.path()).unwrap();
    assert_eq!(maps.len(), 2 * images.len());
    for m in maps {
        let back = read_map_text(&m.raw).unwrap();
        assert_eq!(back.dim(), m.map.dim());
        for (a, b) in back.iter().zip(&m.map) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!(m.png.exists());
    }
}

#[test]
fn protocol_never_trains_on_the_held_out_domain() {
    let data = generate(&BenchmarkConfig { seed: 5, domains: 3, per_domain: 20, classes: 7, image_size: 16, shortcut: 0.9 }).unwrap();
    let mut cfg = small_config();
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let r = run_protocol::<f64>(&data, &[Method::Baseline, Method::I2adr], &[0], &cfg, Some(dir.path())).unwrap();
    assert_eq!(r.runs.len(), 2 * 3);
    for run in &r.runs {
        assert!(!run.trained_on.contains(&run.held_out), "{run:?}");
        assert!(!run.sources.contains(&run.held_out));
        assert_eq!(run.sources.len(), 2);
    }
}
