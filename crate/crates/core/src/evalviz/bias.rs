//! Divergence of domain-specific models' final-block attention on a set of
//! images.

use ndarray::Array4;

use crate::attention_ops::{block_attention_batch, SpatialMap};
use crate::backbone::Backbone;
use crate::datagen::{to_tensor, Sample};
use crate::inter_adr::map_distance;
use crate::{Error, Real, Result};

/// `1 - cos(a, b)` of two maps viewed as vectors.
pub fn cosine_distance(a: &SpatialMap<f64>, b: &SpatialMap<f64>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.values().iter().zip(b.values().iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDistance {
    pub a: usize,
    pub b: usize,
    pub l2: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDivergence {
    pub index: usize,
    pub pairs: Vec<PairDistance>,
    /// Mean over model pairs.
    pub l2: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub models: usize,
    pub images: Vec<ImageDivergence>,
    pub mean_l2: f64,
    pub mean_cosine: f64,
}

/// Final-block attention maps of each model for each image, `[model][image]`.
pub fn final_block_maps<T: Real>(models: &[&Backbone<T>], images: &[&Sample]) -> Result<Vec<Vec<SpatialMap<f64>>>> {
    let mut out = Vec::with_capacity(models.len());
    for m in models {
        let size = m.config().input_size;
        let mut maps = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let x: Array4<T> = to_tensor(&chunk.iter().map(|s| s.image.as_slice()).collect::<Vec<_>>(), size);
            let taps = m.forward_with_taps(x.view())?.taps;
            let last = taps.last().expect("at least one block");
            for (_, map) in block_attention_batch(last.view())? {
                maps.push(SpatialMap::new(map.values().mapv(|v| v.f64()))?);
            }
        }
        out.push(maps);
    }
    Ok(out)
}

/// Pairwise L2 and cosine distances between every pair of models' final
/// block attention, per image.
pub fn bias_report<T: Real>(models: &[&Backbone<T>], images: &[&Sample]) -> Result<BiasReport> {
    if models.len() < 2 {
        return Err(Error::Param(format!("need at least 2 models to compare, got {}", models.len())));
    }
    if images.is_empty() {
        return Err(Error::Param("no images to compare on".into()));
    }
    let maps = final_block_maps(models, images)?;
    let mut per_image = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        let mut pairs = Vec::new();
        for a in 0..models.len() {
            for b in a + 1..models.len() {
                let (x, y) = (&maps[a][i], &maps[b][i]);
                pairs.push(PairDistance { a, b, l2: map_distance(x.values(), y.values()), cosine: cosine_distance(x, y) });
            }
        }
        let k = pairs.len() as f64;
        let l2 = pairs.iter().map(|p| p.l2).sum::<f64>() / k;
        let cosine = pairs.iter().map(|p| p.cosine).sum::<f64>() / k;
        per_image.push(ImageDivergence { index: i, pairs, l2, cosine });
    }
    let n = per_image.len() as f64;
    Ok(BiasReport {
        models: models.len(),
        mean_l2: per_image.iter().map(|d| d.l2).sum::<f64>() / n,
        mean_cosine: per_image.iter().map(|d| d.cosine).sum::<f64>() / n,
        images: per_image,
    })
}

/// Paired one-sided sign test of `a > b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    SignTest { wins, losses, ties, p_value: binomial_upper_tail(wins + losses, wins) }
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`, summed in log space.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    // log C(n, j) built incrementally
    let mut log_c = 0.0;
    let mut terms = Vec::with_capacity(n - k + 1);
    for j in 0..=n {
        if j > 0 {
            log_c += ((n - j + 1) as f64).ln() - (j as f64).ln();
        }
        if j >= k {
            terms.push(log_c - n as f64 * std::f64::consts::LN_2);
        }
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()).exp().min(1.0)
}
