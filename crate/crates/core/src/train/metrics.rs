use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// 1 where `pred > threshold`, else 0.
pub fn binarize<T: Float>(pred: &Tensor<T>, threshold: f64) -> Tensor<T> {
    pred.map(|v| {
        if v.as_f64() > threshold {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn check_pair<T: Float>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            op,
            "shape",
            format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            ),
        ));
    }
    Ok(())
}

/// Sums `(Σ p·t, Σ p, Σ t)` over a slice pair in 64-bit.
pub(crate) fn overlap_sums<T: Float>(pred: &[T], target: &[T]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p.as_f64(), t.as_f64());
        inter += p * t;
        sp += p;
        st += t;
    }
    (inter, sp, st)
}

/// Soft Dice `(2·Σ p·t + smooth) / (Σ p + Σ t + smooth)` over every element.
pub fn dice_coefficient<T: Float>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    smooth: f64,
) -> Result<f64> {
    check_pair("dice_coefficient", pred, target)?;
    let (inter, sp, st) = overlap_sums(pred.data(), target.data());
    Ok(dice_from_sums(inter, sp, st, smooth))
}

pub(crate) fn dice_from_sums(inter: f64, sum_pred: f64, sum_target: f64, smooth: f64) -> f64 {
    (2.0 * inter + smooth) / (sum_pred + sum_target + smooth)
}

/// `(|A∩B| + smooth) / (|A∪B| + smooth)` over every element of two binary
/// tensors.
pub fn iou<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<f64> {
    check_pair("iou", pred, target)?;
    let (inter, sp, st) = overlap_sums(pred.data(), target.data());
    Ok((inter + smooth) / (sp + st - inter + smooth))
}

/// Per-image binarized Dice and IoU and soft Dice loss for an N-leading batch.
pub fn per_image_scores<T: Float>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    threshold: f64,
    smooth: f64,
) -> Result<Vec<ImageScore>> {
    check_pair("per_image_scores", probs, target)?;
    let n = probs.shape()[0];
    let per = probs.numel() / n.max(1);
    let binary = binarize(probs, threshold);
    Ok((0..n)
        .map(|i| {
            let range = i * per..(i + 1) * per;
            let t = &target.data()[range.clone()];
            let (bi, bp, bt) = overlap_sums(&binary.data()[range.clone()], t);
            let (si, sp, st) = overlap_sums(&probs.data()[range], t);
            ImageScore {
                dice: dice_from_sums(bi, bp, bt, smooth),
                iou: (bi + smooth) / (bp + bt - bi + smooth),
                loss: 1.0 - dice_from_sums(si, sp, st, smooth),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScore {
    pub dice: f64,
    pub iou: f64,
    pub loss: f64,
}

/// Mean scores of one split at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dice: f64,
    pub iou: f64,
    pub loss: f64,
    pub epoch: usize,
    pub split_name: String,
}

impl MetricsRecord {
    /// Means of `scores`; all zero when `scores` is empty.
    pub fn from_scores(scores: &[ImageScore], epoch: usize, split_name: impl Into<String>) -> Self {
        let n = scores.len().max(1) as f64;
        Self {
            dice: scores.iter().map(|s| s.dice).sum::<f64>() / n,
            iou: scores.iter().map(|s| s.iou).sum::<f64>() / n,
            loss: scores.iter().map(|s| s.loss).sum::<f64>() / n,
            epoch,
            split_name: split_name.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(&[v.len()], v).unwrap()
    }

    #[test]
    fn hand_examples() {
        let p = t(&[1.0, 1.0, 0.0, 0.0]);
        let g = t(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(dice_coefficient(&p, &g, 0.0).unwrap(), 0.5);
        assert!((iou(&p, &g, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_coefficient(&p, &p, 0.0).unwrap(), 1.0);
        assert_eq!(iou(&g, &g, 0.0).unwrap(), 1.0);
        let z = t(&[0.0; 4]);
        assert_eq!(dice_coefficient(&z, &z, 1e-6).unwrap(), 1.0);
        assert_eq!(iou(&t(&[1.0, 0.0]), &t(&[0.0, 1.0]), 0.0).unwrap(), 0.0);
        assert!(dice_coefficient(&p, &t(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn binarize_is_strict_and_idempotent() {
        let b = binarize(&t(&[0.5, 0.2, 0.7, 0.5000001]), 0.5);
        assert_eq!(b.data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(binarize(&b, 0.5), b);
    }

    #[test]
    fn per_image_scores_are_independent() {
        let probs = Tensor::<f64>::from_f64_slice(&[2, 1, 1, 2], &[0.9, 0.1, 0.2, 0.3]).unwrap();
        let target = Tensor::from_f64_slice(&[2, 1, 1, 2], &[1.0, 0.0, 1.0, 1.0]).unwrap();
        let s = per_image_scores(&probs, &target, 0.5, 0.0).unwrap();
        assert_eq!(s[0].dice, 1.0);
        assert_eq!(s[1].dice, 0.0);
        let rec = MetricsRecord::from_scores(&s, 3, "val");
        assert_eq!(rec.dice, 0.5);
        assert_eq!(rec.split_name, "val");
    }
}
