//! Inter-model attention diversification: simulate, divide and assemble.
//!
//! Every model (the aggregated model `0` and the domain-specific models
//! `1..=S`) produces a per-block attention profile for a sample. Models that
//! classify the sample correctly form the positive group, the rest the
//! negative group. Each group is max-assembled into per-block targets, and the
//! aggregated model is pulled toward the positive target and pushed away from
//! the negative one. Targets are constants: no gradient flows through them.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};

use crate::attention_ops::{cross_model_max, SpatialMap};
use crate::{Error, Real, Result};

/// One model's attention maps for one sample, block order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile<T> {
    pub model: usize,
    pub prediction: usize,
    pub blocks: Vec<SpatialMap<T>>,
}

impl<T: Real> AttentionProfile<T> {
    /// Validates that every block map has unit mass.
    pub fn new(model: usize, prediction: usize, blocks: Vec<SpatialMap<T>>) -> Result<Self> {
        let tol = T::mass_tolerance().max(T::of(1e-5));
        for (b, m) in blocks.iter().enumerate() {
            let s = m.sum();
            if (s - T::one()).abs() > tol {
                return Err(Error::Param(format!(
                    "model {model} block {} attention sums to {s}, not 1",
                    b + 1
                )));
            }
        }
        Ok(Self { model, prediction, blocks })
    }
}

/// Model ids whose prediction matched the label, and the rest.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DividedGroups {
    pub positive: BTreeSet<usize>,
    pub negative: BTreeSet<usize>,
}

/// Task-related (`positive`) and domain-related (`negative`) per-block
/// targets; a target is absent when its group is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledTargets<T> {
    pub positive: Option<Vec<SpatialMap<T>>>,
    pub negative: Option<Vec<SpatialMap<T>>>,
}

fn check_models<T>(profiles: &[AttentionProfile<T>]) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::Param("no attention profiles".into()));
    }
    let ids: BTreeSet<usize> = profiles.iter().map(|p| p.model).collect();
    if ids.len() != profiles.len() {
        return Err(Error::Param("duplicate model id among profiles".into()));
    }
    let s = profiles.len() - 1;
    if let Some(missing) = (0..=s).find(|j| !ids.contains(j)) {
        return Err(Error::Param(format!("missing attention profile for model {missing}")));
    }
    Ok(())
}

/// Splits models `0..=S` by whether their prediction equals `label`.
pub fn divide<T>(profiles: &[AttentionProfile<T>], label: usize) -> Result<DividedGroups> {
    check_models(profiles)?;
    let mut groups = DividedGroups::default();
    for p in profiles {
        if p.prediction == label {
            groups.positive.insert(p.model);
        } else {
            groups.negative.insert(p.model);
        }
    }
    Ok(groups)
}

/// Pixel-wise cross-model maximum within each group, block by block.
pub fn assemble<T: Real>(
    profiles: &[AttentionProfile<T>],
    groups: &DividedGroups,
) -> Result<AssembledTargets<T>> {
    let blocks = profiles.first().map_or(0, |p| p.blocks.len());
    if profiles.iter().any(|p| p.blocks.len() != blocks) {
        return Err(Error::Shape("profiles disagree on the number of blocks".into()));
    }
    let gather = |members: &BTreeSet<usize>| -> Result<Option<Vec<SpatialMap<T>>>> {
        let chosen: Vec<&AttentionProfile<T>> =
            profiles.iter().filter(|p| members.contains(&p.model)).collect();
        (0..blocks)
            .map(|b| match cross_model_max(chosen.iter().map(|p| &p.blocks[b])) {
                Ok(m) => Ok(Some(m)),
                Err(Error::EmptyGroup) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Option<Vec<_>>>>()
    };
    Ok(AssembledTargets { positive: gather(&groups.positive)?, negative: gather(&groups.negative)? })
}

fn distances<T: Real>(agg: &AttentionProfile<T>, targets: &[SpatialMap<T>]) -> Result<Vec<(T, Array2<T>)>> {
    if agg.blocks.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} aggregated blocks vs {} target blocks",
            agg.blocks.len(),
            targets.len()
        )));
    }
    agg.blocks
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(b, (v, u))| {
            if v.dim() != u.dim() {
                return Err(Error::Shape(format!(
                    "block {}: aggregated map {:?} vs target {:?}",
                    b + 1,
                    v.dim(),
                    u.dim()
                )));
            }
            let d = &v.values() - &u.values();
            let n = d.iter().map(|&x| x * x).sum::<T>().sqrt();
            Ok((n, d))
        })
        .collect()
}

/// `sum_b ||V0^b - U+^b||_2`, or zero when the positive group is empty.
pub fn dir_loss<T: Real>(agg: &AttentionProfile<T>, targets: &AssembledTargets<T>) -> Result<T> {
    match &targets.positive {
        None => Ok(T::zero()),
        Some(u) => Ok(distances(agg, u)?.into_iter().map(|(n, _)| n).sum()),
    }
}

/// `-sum_b ||V0^b - U-^b||_2`, or zero when the negative group is empty.
pub fn dvr_loss<T: Real>(agg: &AttentionProfile<T>, targets: &AssembledTargets<T>) -> Result<T> {
    match &targets.negative {
        None => Ok(T::zero()),
        Some(u) => Ok(-distances(agg, u)?.into_iter().map(|(n, _)| n).sum::<T>()),
    }
}

pub fn inter_loss<T: Real>(dir: T, dvr: T, lambda_dir: T, lambda_dvr: T) -> T {
    lambda_dir * dir + lambda_dvr * dvr
}

/// Smoothing under the square root of the norm gradient; makes the
/// gradient at a zero difference exactly zero.
const NORM_EPS: f64 = 1e-12;

/// Gradient of `lambda_dir * dir + lambda_dvr * dvr` w.r.t. each of the
/// aggregated model's block maps.
pub fn inter_grad<T: Real>(
    agg: &AttentionProfile<T>,
    targets: &AssembledTargets<T>,
    lambda_dir: T,
    lambda_dvr: T,
) -> Result<Vec<Array2<T>>> {
    let mut grads: Vec<Array2<T>> = agg.blocks.iter().map(|m| Array2::zeros(m.dim())).collect();
    let mut add = |target: &Option<Vec<SpatialMap<T>>>, sign: T| -> Result<()> {
        if let Some(u) = target {
            for (g, (_, d)) in grads.iter_mut().zip(distances(agg, u)?) {
                let denom = (d.iter().map(|&x| x * x).sum::<T>() + T::of(NORM_EPS)).sqrt();
                g.zip_mut_with(&d, |g, &x| *g += sign * x / denom);
            }
        }
        Ok(())
    };
    add(&targets.positive, lambda_dir)?;
    add(&targets.negative, -lambda_dvr)?;
    Ok(grads)
}

/// Per-sample inter-model terms: `(dir, dvr)` and the gradient w.r.t. the
/// aggregated model's block maps.
pub struct SampleInter<T> {
    pub dir: T,
    pub dvr: T,
    pub grads: Vec<Array2<T>>,
    pub groups: DividedGroups,
}

/// Runs divide, assemble and both losses for one sample. `profiles[0]` must
/// be the aggregated model.
pub fn sample_inter<T: Real>(
    profiles: &[AttentionProfile<T>],
    label: usize,
    lambda_dir: T,
    lambda_dvr: T,
) -> Result<SampleInter<T>> {
    let groups = divide(profiles, label)?;
    let targets = assemble(profiles, &groups)?;
    let agg = profiles
        .iter()
        .find(|p| p.model == 0)
        .ok_or_else(|| Error::Param("missing attention profile for model 0".into()))?;
    Ok(SampleInter {
        dir: dir_loss(agg, &targets)?,
        dvr: dvr_loss(agg, &targets)?,
        grads: inter_grad(agg, &targets, lambda_dir, lambda_dvr)?,
        groups,
    })
}

/// Euclidean distance between two maps of equal shape.
pub fn map_distance<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn profile(model: usize, prediction: usize, maps: &[Array2<f64>]) -> AttentionProfile<f64> {
        AttentionProfile::new(model, prediction, maps.iter().map(|m| SpatialMap::new(m.clone()).unwrap()).collect())
            .unwrap()
    }

    #[test]
    fn divide_cases() {
        let m = array![[0.5, 0.5]];
        let all: Vec<_> = (0..4).map(|j| profile(j, 3, &[m.clone()])).collect();
        let g = divide(&all, 3).unwrap();
        assert_eq!(g.positive, (0..4).collect());
        assert!(g.negative.is_empty());

        let preds = [3, 3, 1, 3];
        let mixed: Vec<_> = (0..4).map(|j| profile(j, preds[j], &[m.clone()])).collect();
        let g = divide(&mixed, 3).unwrap();
        assert_eq!(g.positive, [0, 1, 3].into_iter().collect());
        assert_eq!(g.negative, [2].into_iter().collect());

        let g = divide(&all, 0).unwrap();
        assert!(g.positive.is_empty());
        assert_eq!(g.negative, (0..4).collect());
    }

    #[test]
    fn divide_reports_missing_model() {
        let m = array![[1.0]];
        let ps = vec![profile(0, 0, &[m.clone()]), profile(2, 0, &[m])];
        match divide(&ps, 0) {
            Err(Error::Param(msg)) => assert!(msg.contains("model 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn assemble_single_member_is_verbatim_and_empty_is_absent() {
        let ps = vec![profile(0, 1, &[array![[0.2, 0.8]]]), profile(1, 0, &[array![[0.6, 0.4]]])];
        let g = divide(&ps, 1).unwrap();
        let t = assemble(&ps, &g).unwrap();
        assert_eq!(t.positive.as_ref().unwrap()[0], ps[0].blocks[0]);
        assert_eq!(t.negative.as_ref().unwrap()[0], ps[1].blocks[0]);

        let g = divide(&ps[..1], 1).unwrap();
        let t = assemble(&ps[..1], &g).unwrap();
        assert!(t.negative.is_none());
        assert_eq!(dvr_loss(&ps[0], &t).unwrap(), 0.0);
    }

    #[test]
    fn dir_and_dvr_hand_values() {
        let agg = profile(0, 0, &[array![[0.5, 0.5]]]);
        let u = vec![SpatialMap::new(array![[0.1, 0.9]]).unwrap()];
        let t = AssembledTargets { positive: Some(u.clone()), negative: Some(u) };
        let expected = (0.16f64 + 0.16).sqrt();
        assert!((dir_loss(&agg, &t).unwrap() - expected).abs() < 1e-15);
        assert!((dvr_loss(&agg, &t).unwrap() + expected).abs() < 1e-15);
        assert!((expected - 0.5657).abs() < 1e-4);
    }

    #[test]
    fn identical_targets_give_zero_loss_and_gradient() {
        let agg = profile(0, 0, &[array![[0.3, 0.7]], array![[0.25, 0.25], [0.25, 0.25]]]);
        let t = AssembledTargets { positive: Some(agg.blocks.clone()), negative: Some(agg.blocks.clone()) };
        assert_eq!(dir_loss(&agg, &t).unwrap(), 0.0);
        assert_eq!(dvr_loss(&agg, &t).unwrap(), 0.0);
        let g = inter_grad(&agg, &t, 2.0, 1.0).unwrap();
        assert!(g.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn inter_loss_arithmetic() {
        assert_eq!(inter_loss(0.0, 0.0, 2.0, 1.0), 0.0);
        assert!((inter_loss(0.5, -0.25, 2.0, 1.0) - 0.75f64).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let agg = profile(0, 0, &[array![[0.5, 0.5]]]);
        let t = AssembledTargets {
            positive: Some(vec![SpatialMap::new(array![[0.5], [0.5]]).unwrap()]),
            negative: None,
        };
        assert!(matches!(dir_loss(&agg, &t), Err(Error::Shape(_))));
    }

    #[test]
    fn profile_requires_unit_mass() {
        assert!(AttentionProfile::new(0, 0, vec![SpatialMap::new(array![[0.5, 0.6]]).unwrap()]).is_err());
    }
}
