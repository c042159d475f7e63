//! Dice coefficient for evaluation and soft Dice loss for training.

use std::collections::BTreeMap;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, SegmentationOutput};
use crate::volume_io::{ClassScheme, LabelMap};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    pub per_class: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Hard Dice per class: `2|P ∩ G| / (|P| + |G|)`, 1.0 when a class is absent
/// from both maps.
pub fn dice_coefficient(pred: &LabelMap, gt: &LabelMap, scheme: &ClassScheme, include_background: bool) -> Result<DiceResult> {
    if pred.shape() != gt.shape() {
        return Err(Error::Contract(format!("prediction shape {:?} != ground-truth shape {:?}", pred.shape(), gt.shape())));
    }
    if &pred.scheme != scheme || &gt.scheme != scheme {
        return Err(Error::Contract("label maps do not share the evaluation class scheme".into()));
    }
    pred.validate()?;
    gt.validate()?;
    let c = scheme.num_classes();
    let mut inter = vec![0u64; c];
    let mut np = vec![0u64; c];
    let mut ng = vec![0u64; c];
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        np[p as usize] += 1;
        ng[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let first = if include_background { 0 } else { 1 };
    let per_class: BTreeMap<String, f64> = (first..c)
        .map(|k| {
            let denom = np[k] + ng[k];
            let d = if denom == 0 { 1.0 } else { 2.0 * inter[k] as f64 / denom as f64 };
            (scheme.names()[k].clone(), d)
        })
        .collect();
    let mean = per_class.values().sum::<f64>() / per_class.len().max(1) as f64;
    Ok(DiceResult { per_class, mean })
}

/// Soft Dice loss and its gradient on channel-major buffers of `c` channels.
///
/// `loss = 1 - mean_k (2 I_k + eps) / (P_k + G_k + eps)` over the included
/// channels. The gradient is zero for an excluded background channel.
pub fn soft_dice_cm<T: Scalar>(probs: &[T], target: &[T], c: usize, include_background: bool) -> (f64, Vec<T>) {
    assert_eq!(probs.len(), target.len());
    let n = probs.len() / c;
    let first = if include_background { 0 } else { 1 };
    let k_count = (c - first) as f64;
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); probs.len()];
    for k in first..c {
        let p = &probs[k * n..(k + 1) * n];
        let g = &target[k * n..(k + 1) * n];
        let mut i = 0.0;
        let mut sp = 0.0;
        let mut sg = 0.0;
        for (a, b) in p.iter().zip(g) {
            let (a, b) = (a.f64(), b.f64());
            i += a * b;
            sp += a;
            sg += b;
        }
        let num = 2.0 * i + DICE_EPS;
        let den = sp + sg + DICE_EPS;
        loss += num / den;
        // d/dp_v of num/den = (2 g_v den - num) / den^2
        let scale = -1.0 / (k_count * den * den);
        for (o, b) in grad[k * n..(k + 1) * n].iter_mut().zip(g) {
            *o = T::of(scale * (2.0 * b.f64() * den - num));
        }
    }
    (1.0 - loss / k_count, grad)
}

fn check_pair(probs: &Array4<f32>, gt: &Array4<f32>) -> Result<()> {
    if probs.shape() != gt.shape() {
        return Err(Error::Contract(format!("probability shape {:?} != target shape {:?}", probs.shape(), gt.shape())));
    }
    if probs.iter().chain(gt.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in Dice loss input".into()));
    }
    Ok(())
}

fn channel_major(a: &Array4<f32>) -> Vec<f64> {
    a.view().permuted_axes([3, 0, 1, 2]).iter().map(|&v| v as f64).collect()
}

/// Soft Dice loss over all channels (background included), as used in training.
pub fn dice_loss(probs: &SegmentationOutput, gt_onehot: &Array4<f32>) -> Result<f64> {
    dice_loss_with(probs, gt_onehot, true)
}

pub fn dice_loss_with(probs: &SegmentationOutput, gt_onehot: &Array4<f32>, include_background: bool) -> Result<f64> {
    check_pair(&probs.probs, gt_onehot)?;
    let c = gt_onehot.len_of(Axis(3));
    Ok(soft_dice_cm(&channel_major(&probs.probs), &channel_major(gt_onehot), c, include_background).0)
}

/// Gradient of [`dice_loss`] with respect to the probabilities, shape (X, Y, Z, C).
pub fn dice_loss_grad(probs: &SegmentationOutput, gt_onehot: &Array4<f32>) -> Result<Array4<f64>> {
    check_pair(&probs.probs, gt_onehot)?;
    let s = gt_onehot.shape();
    let (_, g) = soft_dice_cm(&channel_major(&probs.probs), &channel_major(gt_onehot), s[3], true);
    let cm = Array4::from_shape_vec((s[3], s[0], s[1], s[2]), g).expect("gradient layout");
    Ok(cm.permuted_axes([1, 2, 3, 0]).as_standard_layout().into_owned())
}
