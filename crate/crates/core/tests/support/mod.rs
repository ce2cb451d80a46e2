//! Checks shared by the integration and acceptance tests: finite-difference
//! gradients and the exhaustive divide/assemble oracle. Everything runs at f64.
#![allow(dead_code)]

use attdiv::attention_ops::{block_attention_backward, block_attention_cached, spatial_softmax, topk_select, SpatialMap};
use attdiv::backbone::{Backbone, BackboneConfig};
use attdiv::inter_adr::{assemble, dir_loss, divide, dvr_loss, inter_grad, AssembledTargets, AttentionProfile};
use attdiv::intra_adr::{IntraLoss, SceBlock, SceConfig};
use attdiv::nn::{cross_entropy, Params};
use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

/// `||a - n|| / max(||a||, ||n||, FLOOR)` over the coordinates that were
/// kept. The floor turns the check absolute for identically-zero gradients
/// (e.g. top-k over all channels, where the loss is constant).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(FLOOR)
}

/// Outcome of one checked instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub error: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn flat_grads(g: &[ArrayD<f64>]) -> Vec<f64> {
    g.iter().flat_map(|a| a.iter().copied()).collect()
}

fn perturb<M: Params<f64>>(m: &mut M, at: usize, delta: f64) {
    let mut left = at;
    for mut p in m.params_mut() {
        if left < p.len() {
            let v = p.iter_mut().nth(left).expect("in range");
            *v += delta;
            return;
        }
        left -= p.len();
    }
    panic!("parameter index {at} out of range");
}

/// Non-smooth structure of the intra loss: ReLU pattern and top-k choice.
fn intra_signature(x: &Array4<f64>, sce: &SceBlock<f64>, k: usize) -> Vec<u32> {
    let (out, _) = sce.forward(x.view()).unwrap();
    let mut sig: Vec<u32> = out.iter().map(|&v| (v > 0.0) as u32).collect();
    for s in out.outer_iter() {
        let a = spatial_softmax(s).unwrap();
        let sel = topk_select(a.values(), k).unwrap();
        let (_, h, w) = s.dim();
        for i in 0..h {
            for j in 0..w {
                let mut chosen = sel.selected_at(i, j).to_vec();
                chosen.sort_unstable();
                sig.extend(chosen);
            }
        }
    }
    sig
}

/// Intra loss gradients w.r.t. the input features and the SCE parameters.
pub fn intra_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=2);
    let c = rng.random_range(2..=6);
    let (h, w) = (rng.random_range(2..=3), rng.random_range(2..=3));
    let scale = rng.random_range(1..=3);
    // k = C makes the loss constant
    let k = rng.random_range(1..c);
    let sce = SceBlock::<f64>::new(c, SceConfig { scale, topk: k, ..SceConfig::default() }, &mut rng).unwrap();
    let x = Array4::from_shape_fn((n, c, h, w), |_| rng.random_range(-1.0..1.0));

    let loss = |x: &Array4<f64>, sce: &SceBlock<f64>| IntraLoss::forward(x.view(), sce, k).unwrap().value;
    let il = IntraLoss::forward(x.view(), &sce, k).unwrap();
    let (dx, dparams) = il.backward(&sce, 1.0);
    let base = intra_signature(&x, &sce, k);

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for (i, &a) in dx.iter().enumerate() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        *xp.iter_mut().nth(i).unwrap() += STEP;
        *xm.iter_mut().nth(i).unwrap() -= STEP;
        if intra_signature(&xp, &sce, k) != base || intra_signature(&xm, &sce, k) != base {
            skipped += 1;
            continue;
        }
        analytic.push(a);
        numeric.push((loss(&xp, &sce) - loss(&xm, &sce)) / (2.0 * STEP));
    }
    for (i, a) in flat_grads(&dparams).into_iter().enumerate() {
        let (mut sp, mut sm) = (sce.clone(), sce.clone());
        perturb(&mut sp, i, STEP);
        perturb(&mut sm, i, -STEP);
        if intra_signature(&x, &sp, k) != base || intra_signature(&x, &sm, k) != base {
            skipped += 1;
            continue;
        }
        analytic.push(a);
        numeric.push((loss(&x, &sp) - loss(&x, &sm)) / (2.0 * STEP));
    }
    Instance { error: relative_error(&analytic, &numeric), checked: analytic.len(), skipped }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterTerm {
    Dir,
    Dvr,
}

fn unit_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    let m = Array2::from_shape_fn((h, w), |_| rng.random_range(0.01..1.0));
    let s = m.sum();
    m / s
}

/// Gradient of one inter-model term w.r.t. the aggregated model's block
/// features, with the assembled targets held constant.
///
/// Returns `None` when the instance is tie-adjacent (the group is empty or
/// the aggregated map sits on its target).
pub fn inter_instance(seed: u64, term: InterTerm) -> Option<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rng.random_range(2..=3);
    let blocks = rng.random_range(1..=3);
    let shapes: Vec<(usize, usize, usize)> =
        (0..blocks).map(|_| (rng.random_range(1..=4), rng.random_range(2..=3), rng.random_range(2..=3))).collect();
    let feats: Vec<Array3<f64>> = shapes
        .iter()
        .map(|&(c, h, w)| Array3::from_shape_fn((c, h, w), |_| rng.random_range(-2.0..2.0)))
        .collect();
    let label = 1;
    let agg_maps = |f: &[Array3<f64>]| -> Vec<_> { f.iter().map(|x| block_attention_cached(x.view()).unwrap()).collect() };
    let cached = agg_maps(&feats);
    let mut profiles = vec![AttentionProfile::new(
        0,
        if rng.random_bool(0.5) { label } else { 0 },
        cached.iter().map(|(_, m)| m.clone()).collect(),
    )
    .unwrap()];
    for j in 1..=s {
        let maps = shapes.iter().map(|&(_, h, w)| SpatialMap::new(unit_map(&mut rng, h, w)).unwrap()).collect();
        let pred = if rng.random_bool(0.5) { label } else { 2 };
        profiles.push(AttentionProfile::new(j, pred, maps).unwrap());
    }
    let groups = divide(&profiles, label).unwrap();
    let targets: AssembledTargets<f64> = assemble(&profiles, &groups).unwrap();
    let (ld, lv, target) = match term {
        InterTerm::Dir => (1.0, 0.0, targets.positive.clone()),
        InterTerm::Dvr => (0.0, 1.0, targets.negative.clone()),
    };
    let target = target?;
    for (u, (_, v)) in target.iter().zip(&cached) {
        let d = attdiv::inter_adr::map_distance(u.values(), v.values());
        if d < 1e-4 {
            return None;
        }
    }

    let value = |f: &[Array3<f64>]| -> f64 {
        let maps = agg_maps(f);
        maps.iter()
            .zip(&target)
            .map(|((_, v), u)| {
                let d = attdiv::inter_adr::map_distance(v.values(), u.values());
                match term {
                    InterTerm::Dir => d,
                    InterTerm::Dvr => -d,
                }
            })
            .sum()
    };
    let map_grads = inter_grad(&profiles[0], &targets, ld, lv).unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (b, ((attn, _), g)) in cached.iter().zip(&map_grads).enumerate() {
        let dx = block_attention_backward(attn, g.view());
        for (i, &a) in dx.iter().enumerate() {
            let (mut fp, mut fm) = (feats.clone(), feats.clone());
            *fp[b].iter_mut().nth(i).unwrap() += STEP;
            *fm[b].iter_mut().nth(i).unwrap() -= STEP;
            analytic.push(a);
            numeric.push((value(&fp) - value(&fm)) / (2.0 * STEP));
        }
    }
    Some(Instance { error: relative_error(&analytic, &numeric), checked: analytic.len(), skipped: 0 })
}

/// Runs `f` over consecutive seeds until `want` valid instances are found.
pub fn collect(want: usize, mut f: impl FnMut(u64) -> Option<Instance>) -> Vec<Instance> {
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < want {
        if let Some(i) = f(seed) {
            out.push(i);
        }
        seed += 1;
        assert!(seed < 100 * want as u64, "too many tie-adjacent instances");
    }
    out
}

/// Whole-network gradient of cross-entropy plus a linear functional of every
/// block tap, at a sample of parameter coordinates.
pub fn backbone_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BackboneConfig { channels: vec![3, 4], input_size: 8, in_channels: 3, classes: 3 };
    let model = Backbone::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let n = 3;
    let x = Array4::from_shape_fn((n, 3, 8, 8), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let shapes = cfg.tap_shapes();
    let probes: Vec<Array4<f64>> =
        shapes.iter().map(|&(c, h, w)| Array4::from_shape_fn((n, c, h, w), |_| rng.random_range(-0.1..0.1))).collect();

    let value = |m: &Backbone<f64>| -> f64 {
        let mut m = m.clone();
        let (fwd, _) = m.forward_train(x.view()).unwrap();
        let (ce, _) = cross_entropy(fwd.logits.view(), &labels).unwrap();
        ce + fwd.taps.iter().zip(&probes).map(|(t, p)| (t * p).sum()).sum::<f64>()
    };
    let mut m = model.clone();
    let (fwd, cache) = m.forward_train(x.view()).unwrap();
    let (_, dlogits) = cross_entropy(fwd.logits.view(), &labels).unwrap();
    let taps: Vec<Option<Array4<f64>>> = probes.iter().cloned().map(Some).collect();
    let grads = flat_grads(&m.backward(&cache, dlogits.view(), &taps));

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let total = grads.len();
    let picks: Vec<usize> = (0..60).map(|_| rng.random_range(0..total)).collect();
    for i in picks {
        let (mut p, mut q) = (model.clone(), model.clone());
        perturb(&mut p, i, STEP);
        perturb(&mut q, i, -STEP);
        analytic.push(grads[i]);
        numeric.push((value(&p) - value(&q)) / (2.0 * STEP));
    }
    Instance { error: relative_error(&analytic, &numeric), checked: analytic.len(), skipped: 0 }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SpatialMap<f64> {
    let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(0.01..1.0));
    let s = raw.sum();
    SpatialMap::new(raw / s).unwrap()
}

/// Per-pixel max over the models whose membership bit matches, or `None`.
fn oracle_target(maps: &[Vec<SpatialMap<f64>>], member: &[bool], block: usize) -> Option<Array2<f64>> {
    let (h, w) = maps[0][block].dim();
    let mut out: Option<Array2<f64>> = None;
    for (j, m) in maps.iter().enumerate() {
        if !member[j] {
            continue;
        }
        let v = m[block].values();
        let t = out.get_or_insert_with(|| Array2::from_elem((h, w), f64::NEG_INFINITY));
        for i in 0..h {
            for k in 0..w {
                if v[[i, k]] > t[[i, k]] {
                    t[[i, k]] = v[[i, k]];
                }
            }
        }
    }
    out
}

fn norm(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
    }
    s.sqrt()
}

/// Exhaustive divide/assemble check: every correctness pattern of models
/// 0..=S for S <= 3 on grids up to 3x3. Panics on the first mismatch and
/// returns the number of patterns checked.
pub fn divide_assemble_exhaustive() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for s in 1..=3usize {
        for (h, w) in [(1, 1), (1, 3), (2, 2), (3, 2), (3, 3)] {
            let blocks = 2;
            let maps: Vec<Vec<SpatialMap<f64>>> =
                (0..=s).map(|_| (0..blocks).map(|_| random_map(&mut rng, h, w)).collect()).collect();
            for pattern in 0u32..(1 << (s + 1)) {
                let label = 2;
                let correct: Vec<bool> = (0..=s).map(|j| pattern >> j & 1 == 1).collect();
                let profiles: Vec<AttentionProfile<f64>> = (0..=s)
                    .map(|j| {
                        let pred = if correct[j] { label } else { (label + 1 + j) % 5 };
                        AttentionProfile::new(j, pred, maps[j].clone()).unwrap()
                    })
                    .collect();
                let groups = divide(&profiles, label).unwrap();
                let pos: Vec<usize> = (0..=s).filter(|&j| correct[j]).collect();
                let neg: Vec<usize> = (0..=s).filter(|&j| !correct[j]).collect();
                assert_eq!(groups.positive.iter().copied().collect::<Vec<_>>(), pos);
                assert_eq!(groups.negative.iter().copied().collect::<Vec<_>>(), neg);

                let targets = assemble(&profiles, &groups).unwrap();
                let not: Vec<bool> = correct.iter().map(|c| !c).collect();
                let mut expect_dir = 0.0;
                let mut expect_dvr = 0.0;
                for b in 0..blocks {
                    let p = oracle_target(&maps, &correct, b);
                    let n = oracle_target(&maps, &not, b);
                    match (&targets.positive, &p) {
                        (Some(t), Some(o)) => assert_eq!(t[b].values(), o.view()),
                        (None, None) => {}
                        _ => panic!("positive group presence differs for pattern {pattern:b}"),
                    }
                    match (&targets.negative, &n) {
                        (Some(t), Some(o)) => assert_eq!(t[b].values(), o.view()),
                        (None, None) => {}
                        _ => panic!("negative group presence differs for pattern {pattern:b}"),
                    }
                    let v0 = maps[0][b].values().to_owned();
                    if let Some(o) = &p {
                        expect_dir += norm(&v0, o);
                    }
                    if let Some(o) = &n {
                        expect_dvr -= norm(&v0, o);
                    }
                }
                let dir = dir_loss(&profiles[0], &targets).unwrap();
                let dvr = dvr_loss(&profiles[0], &targets).unwrap();
                assert!((dir - expect_dir).abs() <= 1e-12);
                assert!((dvr - expect_dvr).abs() <= 1e-12);
                if pos.is_empty() {
                    assert_eq!(dir, 0.0);
                }
                if neg.is_empty() {
                    assert_eq!(dvr, 0.0);
                }
                cases += 1;
            }
        }
    }
    cases
}
