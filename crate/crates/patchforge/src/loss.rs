//! Adversarial objective: mean cross-entropy over the pixels the model still
//! gets right. The attack *maximizes* this loss, so only currently-correct
//! pixels contribute; pixels under the patch and ignore-index pixels are
//! excluded from the accounting entirely. The mask is recomputed from the
//! live logits on every forward pass and held constant within a gradient
//! step (no differentiation through the argmax).
//!
//! Everything is generic over the float type: production runs use `f32`,
//! while gradient-oracle tests instantiate `f64` so finite differences are
//! trustworthy.

use crate::patch::Region;
use ndarray::{Array2, Array3, NdFloat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label id {id} out of range for {num_classes} classes")]
    ClassOutOfRange { id: u8, num_classes: usize },
    #[error("batch loss over an empty batch")]
    EmptyBatch,
}

/// Partition of the pixel grid relative to the current prediction: `mask` is
/// the correctly-classified set the loss averages over, `excluded` holds
/// patch-region and ignore-index pixels (outside the accounting entirely),
/// and everything else is misclassified.
#[derive(Debug, Clone)]
pub struct CorrectnessMask {
    pub mask: Array2<bool>,
    pub excluded: Array2<bool>,
    /// Number of `true` entries in `mask`.
    pub count: usize,
}

/// Classify every pixel against the live logits. A pixel lands in `mask`
/// iff it is correctly classified, has ground truth, and is outside the
/// patch footprint. Argmax ties resolve to the lowest class index.
pub fn correctness_mask<F: NdFloat>(
    logits: &Array3<F>,
    label: &Array2<u8>,
    patch_region: Option<Region>,
    ignore_index: u8,
) -> Result<CorrectnessMask, LossError> {
    let (num_classes, h, w) = logits.dim();
    if label.dim() != (h, w) {
        return Err(LossError::ShapeMismatch(format!(
            "label {:?} vs logits spatial {h}x{w}",
            label.dim()
        )));
    }
    let mut mask = Array2::from_elem((h, w), false);
    let mut excluded = Array2::from_elem((h, w), false);
    let mut count = 0usize;
    for r in 0..h {
        for c in 0..w {
            let y = label[[r, c]];
            let in_patch = patch_region.is_some_and(|reg| reg.contains(r, c));
            if y == ignore_index || in_patch {
                excluded[[r, c]] = true;
                continue;
            }
            if (y as usize) >= num_classes {
                return Err(LossError::ClassOutOfRange {
                    id: y,
                    num_classes,
                });
            }
            let mut best = 0usize;
            for k in 1..num_classes {
                if logits[[k, r, c]] > logits[[best, r, c]] {
                    best = k;
                }
            }
            if best == y as usize {
                mask[[r, c]] = true;
                count += 1;
            }
        }
    }
    Ok(CorrectnessMask {
        mask,
        excluded,
        count,
    })
}

/// Loss value, gradient w.r.t. logits, and how many pixels contributed.
#[derive(Debug, Clone)]
pub struct MaskedLoss<F> {
    pub value: F,
    pub grad: Array3<F>,
    pub active_pixels: usize,
}

/// Masked per-image loss `-(1/count) * sum log softmax(z)[y]` over the
/// correct set, and its gradient with respect to the logits. An empty set
/// yields loss zero and a zero gradient, so fully-fooled images drop out of
/// the batch mean without special-casing in the caller.
pub fn masked_cross_entropy<F: NdFloat>(
    logits: &Array3<F>,
    label: &Array2<u8>,
    cmask: &CorrectnessMask,
) -> Result<MaskedLoss<F>, LossError> {
    let (num_classes, h, w) = logits.dim();
    if label.dim() != (h, w) || cmask.mask.dim() != (h, w) {
        return Err(LossError::ShapeMismatch(format!(
            "label {:?} / mask {:?} vs logits spatial {h}x{w}",
            label.dim(),
            cmask.mask.dim()
        )));
    }
    let mut grad = Array3::zeros((num_classes, h, w));
    if cmask.count == 0 {
        return Ok(MaskedLoss {
            value: F::zero(),
            grad,
            active_pixels: 0,
        });
    }
    let inv = F::one() / F::from(cmask.count).unwrap();
    let mut total = F::zero();
    for r in 0..h {
        for c in 0..w {
            if !cmask.mask[[r, c]] {
                continue;
            }
            let y = label[[r, c]] as usize;
            if y >= num_classes {
                return Err(LossError::ClassOutOfRange {
                    id: label[[r, c]],
                    num_classes,
                });
            }
            // Log-sum-exp with max subtraction keeps large logits finite.
            let mut max = logits[[0, r, c]];
            for k in 1..num_classes {
                max = max.max(logits[[k, r, c]]);
            }
            let mut sum = F::zero();
            for k in 0..num_classes {
                sum = sum + (logits[[k, r, c]] - max).exp();
            }
            let lse = max + sum.ln();
            total = total - (logits[[y, r, c]] - lse);
            for k in 0..num_classes {
                let softmax = (logits[[k, r, c]] - lse).exp();
                let indicator = if k == y { F::one() } else { F::zero() };
                grad[[k, r, c]] = (softmax - indicator) * inv;
            }
        }
    }
    Ok(MaskedLoss {
        value: total * inv,
        grad,
        active_pixels: cmask.count,
    })
}

/// Batch objective: arithmetic mean of per-image losses.
pub fn batch_loss<F: NdFloat>(per_image: &[F]) -> Result<F, LossError> {
    if per_image.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let sum = per_image.iter().fold(F::zero(), |acc, v| acc + *v);
    Ok(sum / F::from(per_image.len()).unwrap())
}
