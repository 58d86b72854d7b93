//! Mask IoU, precision at IoU thresholds, and split evaluation.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::FcNet;
use crate::synthdata::Sample;
use crate::tensor::Tensor;

pub const PR_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Probability cut used to binarise predictions (strictly above is foreground).
pub const MASK_THRESHOLD: f64 = 0.5;

pub fn binarize(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p > MASK_THRESHOLD).collect()
}

/// Ground-truth {0, 1} tensor to bits.
pub fn mask_bits(mask: &Tensor) -> Vec<bool> {
    mask.data().iter().map(|&v| v > 0.5).collect()
}

/// `|P ∩ G| / |P ∪ G|`; two empty masks agree perfectly and score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidShape(format!(
            "IoU needs equal-sized masks, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of IoUs strictly above `threshold`.
pub fn precision_at(ious: &[f64], threshold: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::InvalidData("precision of an empty set".to_string()));
    }
    Ok(ious.iter().filter(|&&v| v > threshold).count() as f64 / ious.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ious: Vec<f64>,
    pub mean_iou: f64,
    /// `(threshold, precision)` for each entry of [`PR_THRESHOLDS`].
    pub precision: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn from_ious(ious: Vec<f64>) -> Result<Self> {
        if ious.is_empty() {
            return Err(Error::InvalidData("cannot summarise zero samples".to_string()));
        }
        let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
        let precision = PR_THRESHOLDS
            .iter()
            .map(|&t| precision_at(&ious, t).map(|p| (t, p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ious,
            mean_iou,
            precision,
        })
    }

    pub fn precision_at(&self, threshold: f64) -> Option<f64> {
        self.precision.iter().find(|(t, _)| *t == threshold).map(|&(_, p)| p)
    }
}

/// Per-sample IoU of the model's binarised prediction.
pub fn sample_iou(model: &FcNet, sample: &Sample) -> Result<f64> {
    let pred = model.predict(&sample.image, &sample.expression)?;
    iou(&pred.binary_mask(), &mask_bits(&sample.mask))
}

pub fn evaluate(model: &FcNet, samples: &[Sample]) -> Result<EvalReport> {
    let ious = samples
        .iter()
        .map(|s| sample_iou(model, s))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_ious(ious)
}
