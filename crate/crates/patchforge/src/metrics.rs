//! Confusion-matrix segmentation metrics (per-class IoU, MIoU) and the
//! spatial spread profile that quantifies how far a patch's influence reaches.
//!
//! MIoU is computed from a single confusion matrix accumulated over the whole
//! split (Cityscapes convention), never as a mean of per-image MIoU values.
//! Matrices merge by elementwise addition, so evaluation parallelizes as
//! map/reduce with order-independent results.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patch::Region;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class id {id} out of range (num_classes = {num_classes})")]
    ClassOutOfRange { id: usize, num_classes: usize },
    #[error("no class has a defined IoU (empty confusion matrix)")]
    NoDefinedClasses,
    #[error("cannot merge: {0}")]
    MergeMismatch(String),
}

/// Pixel-count confusion matrix. `counts[[g, p]]` is the number of pixels
/// with ground truth `g` predicted as `p`. Ignored and excluded pixels are
/// never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
            num_classes,
        }
    }

    /// Build directly from raw counts. Used by tests and report loading.
    pub fn from_counts(counts: Array2<u64>) -> Self {
        assert_eq!(counts.nrows(), counts.ncols(), "confusion matrix must be square");
        let num_classes = counts.nrows();
        Self { counts, num_classes }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Total number of counted pixels.
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Accumulate one image. Pixels inside `exclude_region` and pixels whose
    /// label equals `ignore_index` are skipped. Accumulation is associative
    /// and commutative across images (integer adds).
    pub fn update(
        &mut self,
        pred: &Array2<u8>,
        label: &Array2<u8>,
        exclude_region: Option<Region>,
        ignore_index: u8,
    ) -> Result<(), MetricsError> {
        if pred.dim() != label.dim() {
            return Err(MetricsError::ShapeMismatch(format!(
                "pred {:?} vs label {:?}",
                pred.dim(),
                label.dim()
            )));
        }
        let (h, w) = pred.dim();
        for r in 0..h {
            for c in 0..w {
                if let Some(region) = exclude_region {
                    if region.contains(r, c) {
                        continue;
                    }
                }
                let g = label[[r, c]];
                if g == ignore_index {
                    continue;
                }
                let g = g as usize;
                let p = pred[[r, c]] as usize;
                if g >= self.num_classes {
                    return Err(MetricsError::ClassOutOfRange {
                        id: g,
                        num_classes: self.num_classes,
                    });
                }
                if p >= self.num_classes {
                    return Err(MetricsError::ClassOutOfRange {
                        id: p,
                        num_classes: self.num_classes,
                    });
                }
                self.counts[[g, p]] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise add of another matrix (map/reduce merge step).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.num_classes != other.num_classes {
            return Err(MetricsError::MergeMismatch(format!(
                "num_classes {} vs {}",
                self.num_classes, other.num_classes
            )));
        }
        self.counts += &other.counts;
        Ok(())
    }

    /// Per-class IoU: `counts[c][c] / (row_c + col_c - counts[c][c])`.
    /// `None` when the class appears in neither prediction nor ground truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.counts[[c, c]];
                let row: u64 = self.counts.row(c).sum();
                let col: u64 = self.counts.column(c).sum();
                let union = row + col - tp;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean over classes with a defined IoU. Undefined classes are excluded
    /// from the mean, not treated as zero.
    pub fn miou(&self) -> Result<f64, MetricsError> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(MetricsError::NoDefinedClasses);
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Flip-rate of predictions binned by Chebyshev distance from the patch
/// rectangle. Raw counts are kept so profiles from different images merge
/// exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpreadProfile {
    /// Inclusive upper Chebyshev distance of each bin; bin `i` covers
    /// distances `(edge[i-1], edge[i]]` with an implicit lower edge of 0.
    pub bin_edges: Vec<usize>,
    /// Off-patch pixels per bin.
    pub pixels_per_bin: Vec<u64>,
    /// Pixels per bin whose predicted class changed clean -> attacked.
    pub flipped_per_bin: Vec<u64>,
    /// Distance threshold for the far-field ratio.
    pub far_radius: usize,
    /// Flipped pixels at distance > far_radius.
    pub flipped_far: u64,
    /// All flipped off-patch pixels.
    pub flipped_total: u64,
}

impl SpreadProfile {
    /// Per-bin flip rates; 0 for empty bins.
    pub fn flip_rates(&self) -> Vec<f64> {
        self.pixels_per_bin
            .iter()
            .zip(&self.flipped_per_bin)
            .map(|(&n, &f)| if n == 0 { 0.0 } else { f as f64 / n as f64 })
            .collect()
    }

    /// Fraction of all flipped pixels that lie beyond `far_radius`;
    /// 0 when nothing flipped.
    pub fn far_flip_ratio(&self) -> f64 {
        if self.flipped_total == 0 {
            0.0
        } else {
            self.flipped_far as f64 / self.flipped_total as f64
        }
    }

    pub fn total_off_patch_pixels(&self) -> u64 {
        self.pixels_per_bin.iter().sum()
    }

    /// Add counts from another profile with identical binning.
    pub fn merge(&mut self, other: &SpreadProfile) -> Result<(), MetricsError> {
        if self.bin_edges != other.bin_edges || self.far_radius != other.far_radius {
            return Err(MetricsError::MergeMismatch(
                "spread profiles have different binning".into(),
            ));
        }
        for (a, b) in self.pixels_per_bin.iter_mut().zip(&other.pixels_per_bin) {
            *a += b;
        }
        for (a, b) in self.flipped_per_bin.iter_mut().zip(&other.flipped_per_bin) {
            *a += b;
        }
        self.flipped_far += other.flipped_far;
        self.flipped_total += other.flipped_total;
        Ok(())
    }
}

/// Conventional far-field threshold: twice the longer patch side.
pub fn default_far_radius(region: Region) -> usize {
    2 * region.height().max(region.width())
}

/// Chebyshev (chessboard) distance from a pixel to the nearest pixel of the
/// rectangle; 0 inside it.
fn chebyshev_to_region(r: usize, c: usize, region: Region) -> usize {
    let dr = if r < region.row0 {
        region.row0 - r
    } else if r >= region.row1 {
        r - region.row1 + 1
    } else {
        0
    };
    let dc = if c < region.col0 {
        region.col0 - c
    } else if c >= region.col1 {
        c - region.col1 + 1
    } else {
        0
    };
    dr.max(dc)
}

/// Bin prediction flips (clean vs attacked) by distance from the patch.
/// Bins partition the off-patch pixel set.
pub fn spread_profile(
    pred_clean: &Array2<u8>,
    pred_attacked: &Array2<u8>,
    patch_region: Region,
    bin_width: usize,
    far_radius: usize,
) -> Result<SpreadProfile, MetricsError> {
    if pred_clean.dim() != pred_attacked.dim() {
        return Err(MetricsError::ShapeMismatch(format!(
            "clean {:?} vs attacked {:?}",
            pred_clean.dim(),
            pred_attacked.dim()
        )));
    }
    assert!(bin_width >= 1, "bin_width must be >= 1");
    let (h, w) = pred_clean.dim();
    if patch_region.row1 > h || patch_region.col1 > w {
        return Err(MetricsError::ShapeMismatch(format!(
            "patch region {:?} exceeds image {}x{}",
            patch_region, h, w
        )));
    }

    // Maximum distance is attained on the image boundary.
    let max_d = (patch_region.row0.max(h - patch_region.row1))
        .max(patch_region.col0.max(w - patch_region.col1));
    let n_bins = max_d.div_ceil(bin_width);
    let bin_edges: Vec<usize> = (1..=n_bins).map(|i| i * bin_width).collect();

    let mut pixels_per_bin = vec![0u64; n_bins];
    let mut flipped_per_bin = vec![0u64; n_bins];
    let mut flipped_far = 0u64;
    let mut flipped_total = 0u64;

    for r in 0..h {
        for c in 0..w {
            let d = chebyshev_to_region(r, c, patch_region);
            if d == 0 {
                continue;
            }
            let bin = (d - 1) / bin_width;
            pixels_per_bin[bin] += 1;
            if pred_clean[[r, c]] != pred_attacked[[r, c]] {
                flipped_per_bin[bin] += 1;
                flipped_total += 1;
                if d > far_radius {
                    flipped_far += 1;
                }
            }
        }
    }

    Ok(SpreadProfile {
        bin_edges,
        pixels_per_bin,
        flipped_per_bin,
        far_radius,
        flipped_far,
        flipped_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn region(row0: usize, col0: usize, row1: usize, col1: usize) -> Region {
        Region { row0, col0, row1, col1 }
    }

    /// Brute-force oracle: set-based IoU computed per class with explicit
    /// pixel enumeration, no confusion matrix.
    fn oracle_iou(pred: &Array2<u8>, label: &Array2<u8>, num_classes: usize) -> Vec<Option<f64>> {
        (0..num_classes as u8)
            .map(|cls| {
                let mut inter = 0u64;
                let mut union = 0u64;
                for (p, g) in pred.iter().zip(label.iter()) {
                    let in_p = *p == cls;
                    let in_g = *g == cls;
                    if in_p && in_g {
                        inter += 1;
                    }
                    if in_p || in_g {
                        union += 1;
                    }
                }
                if union == 0 {
                    None
                } else {
                    Some(inter as f64 / union as f64)
                }
            })
            .collect()
    }

    #[test]
    fn perfect_prediction_gives_diagonal() {
        let label = Array2::from_shape_fn((4, 4), |(r, c)| ((r + c) % 3) as u8);
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&label.clone(), &label, None, 255).unwrap();
        let trace: u64 = (0..3).map(|c| cm.counts()[[c, c]]).sum();
        assert_eq!(trace, 16);
        assert_eq!(cm.total(), 16);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn exclude_whole_image_leaves_matrix_unchanged() {
        let label = Array2::from_elem((4, 4), 1u8);
        let pred = Array2::from_elem((4, 4), 0u8);
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&pred, &label, Some(region(0, 0, 4, 4)), 255).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn random_matrices_match_bruteforce_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for trial in 0..200 {
            let num_classes = rng.random_range(3..=5usize);
            let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..num_classes) as u8);
            let label = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..num_classes) as u8);
            let mut cm = ConfusionMatrix::new(num_classes);
            cm.update(&pred, &label, None, 255).unwrap();
            let got = cm.iou_per_class();
            let want = oracle_iou(&pred, &label, num_classes);
            for (c, (g, w)) in got.iter().zip(&want).enumerate() {
                match (g, w) {
                    (None, None) => {}
                    (Some(a), Some(b)) => {
                        assert!((a - b).abs() < 1e-12, "trial {trial} class {c}: {a} vs {b}")
                    }
                    _ => panic!("trial {trial} class {c}: definedness mismatch"),
                }
            }
        }
    }

    #[test]
    fn hand_example_from_set_definition() {
        // [[3,1],[2,4]]: IoU_0 = 3/(4+5-3) = 0.5, IoU_1 = 4/(6+5-4) = 4/7.
        let counts = ndarray::arr2(&[[3u64, 1], [2, 4]]);
        let cm = ConfusionMatrix::from_counts(counts);
        let ious = cm.iou_per_class();
        assert!((ious[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((ious[1].unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert!((cm.miou().unwrap() - 0.5357).abs() < 1e-4);
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let counts = ndarray::arr2(&[[4u64, 0, 0], [0, 4, 0], [0, 0, 0]]);
        let cm = ConfusionMatrix::from_counts(counts);
        assert_eq!(cm.iou_per_class()[2], None);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn empty_matrix_has_no_defined_classes() {
        let cm = ConfusionMatrix::new(3);
        assert!(matches!(cm.miou(), Err(MetricsError::NoDefinedClasses)));
    }

    #[test]
    fn ignore_index_pixels_are_not_counted() {
        let mut label = Array2::from_elem((2, 2), 0u8);
        label[[0, 0]] = 255;
        let pred = Array2::from_elem((2, 2), 0u8);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &label, None, 255).unwrap();
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn class_out_of_range_is_an_error() {
        let label = Array2::from_elem((2, 2), 5u8);
        let pred = Array2::from_elem((2, 2), 0u8);
        let mut cm = ConfusionMatrix::new(3);
        assert!(matches!(
            cm.update(&pred, &label, None, 255),
            Err(MetricsError::ClassOutOfRange { id: 5, .. })
        ));
    }

    #[test]
    fn merge_is_order_independent() {
        let mut rng = StdRng::seed_from_u64(11);
        let mats: Vec<ConfusionMatrix> = (0..6)
            .map(|_| {
                let pred = Array2::from_shape_fn((5, 5), |_| rng.random_range(0..4u8));
                let label = Array2::from_shape_fn((5, 5), |_| rng.random_range(0..4u8));
                let mut cm = ConfusionMatrix::new(4);
                cm.update(&pred, &label, None, 255).unwrap();
                cm
            })
            .collect();
        let mut forward = ConfusionMatrix::new(4);
        for m in &mats {
            forward.merge(m).unwrap();
        }
        let mut backward = ConfusionMatrix::new(4);
        for m in mats.iter().rev() {
            backward.merge(m).unwrap();
        }
        assert_eq!(forward, backward);
    }

    #[test]
    fn merged_matrix_miou_is_not_mean_of_per_image_mious() {
        // Image A: perfect on class 0 only. Image B: heavily confused.
        let a = ConfusionMatrix::from_counts(ndarray::arr2(&[[10u64, 0], [0, 0]]));
        let b = ConfusionMatrix::from_counts(ndarray::arr2(&[[1u64, 9], [9, 1]]));
        let mean_of_mious = (a.miou().unwrap() + b.miou().unwrap()) / 2.0;
        let mut merged = a.clone();
        merged.merge(&b).unwrap();
        let dataset_miou = merged.miou().unwrap();
        // Merged counts: [[11,9],[9,1]] -> IoU_0 = 11/29, IoU_1 = 1/19.
        let expect = (11.0 / 29.0 + 1.0 / 19.0) / 2.0;
        assert!((dataset_miou - expect).abs() < 1e-12);
        assert!((dataset_miou - mean_of_mious).abs() > 0.05);
    }

    #[test]
    fn moving_a_pixel_onto_the_diagonal_never_decreases_miou() {
        // Enumerate small 2-class matrices and every off-diagonal cell.
        for a in 0..4u64 {
            for b in 0..4u64 {
                for c in 0..4u64 {
                    for d in 0..4u64 {
                        let base = ndarray::arr2(&[[a, b], [c, d]]);
                        for (g, p) in [(0usize, 1usize), (1, 0)] {
                            if base[[g, p]] == 0 {
                                continue;
                            }
                            let mut moved = base.clone();
                            moved[[g, p]] -= 1;
                            moved[[g, g]] += 1;
                            let m0 = ConfusionMatrix::from_counts(base.clone());
                            let m1 = ConfusionMatrix::from_counts(moved);
                            if let (Ok(x), Ok(y)) = (m0.miou(), m1.miou()) {
                                assert!(
                                    y >= x - 1e-12,
                                    "miou decreased moving ({g},{p}) in {base:?}: {x} -> {y}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn spread_identical_predictions_all_zero() {
        let pred = Array2::from_shape_fn((8, 8), |(r, c)| ((r * c) % 3) as u8);
        let prof = spread_profile(&pred, &pred.clone(), region(3, 3, 5, 5), 1, 4).unwrap();
        assert!(prof.flip_rates().iter().all(|&r| r == 0.0));
        assert_eq!(prof.far_flip_ratio(), 0.0);
        assert_eq!(prof.flipped_total, 0);
    }

    #[test]
    fn spread_all_flipped() {
        let clean = Array2::from_elem((8, 8), 0u8);
        let attacked = Array2::from_elem((8, 8), 1u8);
        let reg = region(3, 3, 5, 5);
        let far = 2; // pixels beyond Chebyshev distance 2 from the 2x2 block
        let prof = spread_profile(&clean, &attacked, reg, 1, far).unwrap();
        assert!(prof.flip_rates().iter().all(|&r| r == 1.0));
        assert_eq!(prof.total_off_patch_pixels(), 64 - 4);
        // Count off-patch pixels with d > 2 by enumeration.
        let mut beyond = 0u64;
        for r in 0..8 {
            for c in 0..8 {
                let d = super::chebyshev_to_region(r, c, reg);
                if d > far {
                    beyond += 1;
                }
            }
        }
        assert!((prof.far_flip_ratio() - beyond as f64 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn spread_hand_placed_flips_match_enumeration() {
        let clean = Array2::from_elem((8, 8), 0u8);
        let mut attacked = clean.clone();
        let reg = region(3, 3, 5, 5);
        // Flips at distances 1, 2 and 3 from the 2x2 patch at rows/cols 3..5.
        attacked[[2, 3]] = 1; // d = 1
        attacked[[3, 6]] = 1; // d = 2
        attacked[[0, 4]] = 1; // d = 3
        let prof = spread_profile(&clean, &attacked, reg, 1, 2).unwrap();
        assert_eq!(prof.flipped_per_bin[0], 1);
        assert_eq!(prof.flipped_per_bin[1], 1);
        assert_eq!(prof.flipped_per_bin[2], 1);
        assert_eq!(prof.flipped_total, 3);
        assert_eq!(prof.flipped_far, 1);
        assert!((prof.far_flip_ratio() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn spread_bins_partition_off_patch_pixels() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let h = rng.random_range(6..16usize);
            let w = rng.random_range(6..16usize);
            let r0 = rng.random_range(0..h - 2);
            let c0 = rng.random_range(0..w - 2);
            let r1 = rng.random_range(r0 + 1..=h.min(r0 + 4));
            let c1 = rng.random_range(c0 + 1..=w.min(c0 + 4));
            let reg = region(r0, c0, r1, c1);
            let clean = Array2::from_shape_fn((h, w), |_| rng.random_range(0..4u8));
            let attacked = Array2::from_shape_fn((h, w), |_| rng.random_range(0..4u8));
            let bw = rng.random_range(1..4usize);
            let prof = spread_profile(&clean, &attacked, reg, bw, 2).unwrap();
            let area = (r1 - r0) as u64 * (c1 - c0) as u64;
            assert_eq!(prof.total_off_patch_pixels(), (h * w) as u64 - area);
        }
    }

    #[test]
    fn default_far_radius_is_twice_longer_side() {
        assert_eq!(default_far_radius(region(0, 0, 25, 25)), 50);
        assert_eq!(default_far_radius(region(0, 0, 10, 30)), 60);
    }
}
