//! patchforge: training and evaluation of expectation-over-transformation
//! adversarial patches against pluggable semantic-segmentation models.
//!
//! The pipeline: sample a transform (scale / flip / crop) for each training
//! image, paste the current patch at the center of the transformed image,
//! compute a cross-entropy loss over the still-correctly-classified pixels,
//! and take a sign-gradient ascent step on the patch pixels followed by
//! clipping to `[0, 1]`. Evaluation accumulates confusion-matrix MIoU per
//! model and per patch to build a cross-model transfer matrix.

pub mod loss;
pub mod metrics;
pub mod nn;
pub mod patch;
pub mod transforms;
