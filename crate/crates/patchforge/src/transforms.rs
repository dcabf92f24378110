//! The transformation distribution the patch is trained to survive:
//! uniform rescaling, horizontal flip, and a random square crop, applied to
//! image/label pairs. Patch pasting happens after these transforms, in the
//! trainer, so the patch itself is never scaled or flipped.
//!
//! Pipeline order: scale -> flip -> pad -> crop. Images are resized with
//! bilinear interpolation, labels with nearest-neighbor so no class id is
//! ever synthesized. When the scaled image is smaller than the crop window
//! the image is padded bottom/right with a fill color (labels with the
//! ignore index), keeping content anchored at the top-left for determinism.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("invalid transform spec: {0}")]
    InvalidSpec(String),
    #[error("invalid transform config: {0}")]
    InvalidConfig(String),
}

/// One draw from the transform distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    /// Resize factor applied to both axes.
    pub scale: f32,
    pub flip: bool,
    /// Top-left corner of the crop window in the padded, scaled image.
    pub crop_row0: usize,
    pub crop_col0: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub scale_min: f32,
    pub scale_max: f32,
    pub crop_size: usize,
    pub flip_prob: f64,
    /// Per-channel fill for image padding (conventionally the dataset mean).
    pub pad_image_value: [f32; 3],
    /// Fill for label padding (conventionally the ignore index).
    pub pad_label_value: u8,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.5,
            scale_max: 2.0,
            crop_size: 1024,
            flip_prob: 0.5,
            pad_image_value: [0.485, 0.456, 0.406],
            pad_label_value: 255,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<(), TransformError> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(TransformError::InvalidConfig(format!(
                "need 0 < scale_min <= scale_max, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if self.crop_size == 0 {
            return Err(TransformError::InvalidConfig("crop_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(TransformError::InvalidConfig(format!(
                "flip_prob must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// Scaled dimensions: `round(size * scale)`, at least 1.
pub fn scaled_size(h: usize, w: usize, scale: f32) -> (usize, usize) {
    let sh = ((h as f32 * scale).round() as usize).max(1);
    let sw = ((w as f32 * scale).round() as usize).max(1);
    (sh, sw)
}

/// Draw one transform: scale ~ Uniform[scale_min, scale_max], flip ~
/// Bernoulli(flip_prob), crop origin uniform over all valid positions in the
/// padded scaled image. Draw order (scale, flip, row, col) is part of the
/// determinism contract.
pub fn sample_transform<R: Rng>(
    rng: &mut R,
    cfg: &TransformConfig,
    image_h: usize,
    image_w: usize,
) -> Result<TransformSpec, TransformError> {
    cfg.validate()?;
    if image_h == 0 || image_w == 0 {
        return Err(TransformError::InvalidSpec("empty image".into()));
    }
    let scale = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    };
    let flip = rng.random_bool(cfg.flip_prob);
    let (sh, sw) = scaled_size(image_h, image_w, scale);
    let padded_h = sh.max(cfg.crop_size);
    let padded_w = sw.max(cfg.crop_size);
    let crop_row0 = rng.random_range(0..=padded_h - cfg.crop_size);
    let crop_col0 = rng.random_range(0..=padded_w - cfg.crop_size);
    Ok(TransformSpec {
        scale,
        flip,
        crop_row0,
        crop_col0,
    })
}

/// Bilinear resize of a `[3, H, W]` image (align-corners-false sampling).
/// Output values are clamped to `[0, 1]`; identity sizes reproduce the input
/// bit-exactly.
pub fn resize_bilinear(image: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (ch, in_h, in_w) = image.dim();
    let row_ratio = in_h as f32 / out_h as f32;
    let col_ratio = in_w as f32 / out_w as f32;
    let mut out = Array3::zeros((ch, out_h, out_w));
    for r in 0..out_h {
        let src_r = ((r as f32 + 0.5) * row_ratio - 0.5).clamp(0.0, (in_h - 1) as f32);
        let r0 = src_r.floor() as usize;
        let r1 = (r0 + 1).min(in_h - 1);
        let fr = src_r - r0 as f32;
        for c in 0..out_w {
            let src_c = ((c as f32 + 0.5) * col_ratio - 0.5).clamp(0.0, (in_w - 1) as f32);
            let c0 = src_c.floor() as usize;
            let c1 = (c0 + 1).min(in_w - 1);
            let fc = src_c - c0 as f32;
            for k in 0..ch {
                let v = (1.0 - fr) * (1.0 - fc) * image[[k, r0, c0]]
                    + (1.0 - fr) * fc * image[[k, r0, c1]]
                    + fr * (1.0 - fc) * image[[k, r1, c0]]
                    + fr * fc * image[[k, r1, c1]];
                out[[k, r, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a `[H, W]` label mask. Never synthesizes a
/// class id that is absent from the input.
pub fn resize_nearest(label: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (in_h, in_w) = label.dim();
    let row_ratio = in_h as f32 / out_h as f32;
    let col_ratio = in_w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let src_r = (((r as f32 + 0.5) * row_ratio).floor() as usize).min(in_h - 1);
        let src_c = (((c as f32 + 0.5) * col_ratio).floor() as usize).min(in_w - 1);
        label[[src_r, src_c]]
    })
}

fn flip_image(image: &Array3<f32>) -> Array3<f32> {
    let (ch, h, w) = image.dim();
    Array3::from_shape_fn((ch, h, w), |(k, r, c)| image[[k, r, w - 1 - c]])
}

fn flip_label(label: &Array2<u8>) -> Array2<u8> {
    let (h, w) = label.dim();
    Array2::from_shape_fn((h, w), |(r, c)| label[[r, w - 1 - c]])
}

/// Apply one transform draw to an image/label pair, producing a
/// `crop_size x crop_size` pair.
pub fn apply_transform(
    image: &Array3<f32>,
    label: &Array2<u8>,
    spec: &TransformSpec,
    cfg: &TransformConfig,
) -> Result<(Array3<f32>, Array2<u8>), TransformError> {
    cfg.validate()?;
    let (ch, h, w) = image.dim();
    if ch != 3 {
        return Err(TransformError::InvalidSpec(format!(
            "image must have 3 channels, got {ch}"
        )));
    }
    if label.dim() != (h, w) {
        return Err(TransformError::InvalidSpec(format!(
            "label {:?} does not match image {}x{}",
            label.dim(),
            h,
            w
        )));
    }
    let s = cfg.crop_size;
    let (sh, sw) = scaled_size(h, w, spec.scale);

    let (mut img, mut lab) = if (sh, sw) == (h, w) {
        (image.clone(), label.clone())
    } else {
        (
            resize_bilinear(image, sh, sw),
            resize_nearest(label, sh, sw),
        )
    };

    if spec.flip {
        img = flip_image(&img);
        lab = flip_label(&lab);
    }

    let padded_h = sh.max(s);
    let padded_w = sw.max(s);
    if spec.crop_row0 + s > padded_h || spec.crop_col0 + s > padded_w {
        return Err(TransformError::InvalidSpec(format!(
            "crop at ({}, {}) of size {s} exceeds padded bounds {padded_h}x{padded_w}",
            spec.crop_row0, spec.crop_col0
        )));
    }

    if padded_h > sh || padded_w > sw {
        let mut padded_img = Array3::zeros((3, padded_h, padded_w));
        for k in 0..3 {
            padded_img
                .slice_mut(ndarray::s![k, .., ..])
                .fill(cfg.pad_image_value[k]);
        }
        padded_img
            .slice_mut(ndarray::s![.., ..sh, ..sw])
            .assign(&img);
        let mut padded_lab = Array2::from_elem((padded_h, padded_w), cfg.pad_label_value);
        padded_lab.slice_mut(ndarray::s![..sh, ..sw]).assign(&lab);
        img = padded_img;
        lab = padded_lab;
    }

    let out_img = img
        .slice(ndarray::s![
            ..,
            spec.crop_row0..spec.crop_row0 + s,
            spec.crop_col0..spec.crop_col0 + s
        ])
        .to_owned();
    let out_lab = lab
        .slice(ndarray::s![
            spec.crop_row0..spec.crop_row0 + s,
            spec.crop_col0..spec.crop_col0 + s
        ])
        .to_owned();
    Ok((out_img, out_lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    fn toy_cfg(crop: usize) -> TransformConfig {
        TransformConfig {
            crop_size: crop,
            ..Default::default()
        }
    }

    fn identity_spec() -> TransformSpec {
        TransformSpec {
            scale: 1.0,
            flip: false,
            crop_row0: 0,
            crop_col0: 0,
        }
    }

    #[test]
    fn single_valid_draw_is_forced() {
        let cfg = TransformConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            crop_size: 1024,
            flip_prob: 0.0,
            ..Default::default()
        };
        let mut rng = StdRng::seed_from_u64(0);
        let spec = sample_transform(&mut rng, &cfg, 1024, 1024).unwrap();
        assert_eq!(spec, identity_spec());
    }

    #[test]
    fn monte_carlo_scale_mean() {
        // Uniform(0.5, 2) has mean 1.25 and sigma ~ 0.433; the mean of 10000
        // draws has sigma ~ 0.0043, so [1.22, 1.28] is a > 3-sigma band.
        let cfg = TransformConfig::default();
        let mut rng = StdRng::seed_from_u64(42);
        let n = 10_000;
        let mut sum = 0.0f64;
        for _ in 0..n {
            let spec = sample_transform(&mut rng, &cfg, 1024, 2048).unwrap();
            sum += spec.scale as f64;
        }
        let mean = sum / n as f64;
        assert!((1.22..=1.28).contains(&mean), "mean {mean}");
    }

    #[test]
    fn downscale_below_crop_forces_origin_zero() {
        let cfg = TransformConfig {
            scale_min: 0.5,
            scale_max: 0.5,
            ..Default::default()
        };
        let mut rng = StdRng::seed_from_u64(1);
        let spec = sample_transform(&mut rng, &cfg, 1024, 2048).unwrap();
        // Scaled 512x1024, padded to 1024x1024: single valid origin.
        assert_eq!((spec.crop_row0, spec.crop_col0), (0, 0));

        let (img, lab) = apply_transform(
            &Array3::from_elem((3, 1024, 2048), 0.25),
            &Array2::zeros((1024, 2048)),
            &spec,
            &cfg,
        )
        .unwrap();
        assert_eq!(img.dim(), (3, 1024, 1024));
        // Bottom half is padding.
        assert_eq!(img[[0, 600, 0]], cfg.pad_image_value[0]);
        assert_eq!(lab[[600, 0]], cfg.pad_label_value);
        // Top-left is content.
        assert!((img[[0, 0, 0]] - 0.25).abs() < 1e-6);
        assert_eq!(lab[[0, 0]], 0);
    }

    #[test]
    fn identity_transform_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(5);
        let image = Array3::from_shape_simple_fn((3, 16, 16), || rng.random::<f32>());
        let label = Array2::from_shape_fn((16, 16), |_| rng.random_range(0..5u8));
        let (img, lab) = apply_transform(&image, &label, &identity_spec(), &toy_cfg(16)).unwrap();
        assert_eq!(img, image);
        assert_eq!(lab, label);
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = StdRng::seed_from_u64(6);
        let image = Array3::from_shape_simple_fn((3, 8, 12), || rng.random::<f32>());
        let label = Array2::from_shape_fn((8, 12), |_| rng.random_range(0..5u8));
        let flipped = (flip_image(&image), flip_label(&label));
        let restored = (flip_image(&flipped.0), flip_label(&flipped.1));
        assert_eq!(restored.0, image);
        assert_eq!(restored.1, label);
    }

    #[test]
    fn flip_through_apply_transform_restores_input() {
        let mut rng = StdRng::seed_from_u64(7);
        let image = Array3::from_shape_simple_fn((3, 16, 16), || rng.random::<f32>());
        let label = Array2::from_shape_fn((16, 16), |_| rng.random_range(0..3u8));
        let spec = TransformSpec {
            flip: true,
            ..identity_spec()
        };
        let cfg = toy_cfg(16);
        let (img1, lab1) = apply_transform(&image, &label, &spec, &cfg).unwrap();
        let (img2, lab2) = apply_transform(&img1, &lab1, &spec, &cfg).unwrap();
        assert_eq!(img2, image);
        assert_eq!(lab2, label);
    }

    #[test]
    fn nearest_label_resize_preserves_class_set() {
        for seed in 0..50u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let label = Array2::from_shape_fn((13, 17), |_| rng.random_range(0..2u8));
            let input_classes: BTreeSet<u8> = label.iter().copied().collect();
            let spec = TransformSpec {
                scale: 1.7,
                flip: rng.random_bool(0.5),
                crop_row0: rng.random_range(0..6),
                crop_col0: rng.random_range(0..9),
            };
            let cfg = toy_cfg(16);
            let image = Array3::from_elem((3, 13, 17), 0.5);
            let (_, lab) = apply_transform(&image, &label, &spec, &cfg).unwrap();
            for v in lab.iter() {
                assert!(
                    input_classes.contains(v) || *v == cfg.pad_label_value,
                    "seed {seed} produced class {v} absent from input"
                );
            }
        }
    }

    #[test]
    fn transformed_image_stays_in_unit_interval() {
        let cfg = toy_cfg(24);
        for seed in 0..20u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let image = Array3::from_shape_simple_fn((3, 20, 30), || rng.random::<f32>());
            let label = Array2::zeros((20, 30));
            let spec = sample_transform(&mut rng, &cfg, 20, 30).unwrap();
            let (img, _) = apply_transform(&image, &label, &spec, &cfg).unwrap();
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(img.dim(), (3, 24, 24));
        }
    }

    #[test]
    fn out_of_bounds_crop_is_rejected() {
        let image = Array3::from_elem((3, 16, 16), 0.5);
        let label = Array2::zeros((16, 16));
        let spec = TransformSpec {
            crop_row0: 1,
            ..identity_spec()
        };
        assert!(matches!(
            apply_transform(&image, &label, &spec, &toy_cfg(16)),
            Err(TransformError::InvalidSpec(_))
        ));
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let bad_scale = TransformConfig {
            scale_min: 2.0,
            scale_max: 0.5,
            ..Default::default()
        };
        assert!(bad_scale.validate().is_err());
        let bad_flip = TransformConfig {
            flip_prob: 1.5,
            ..Default::default()
        };
        assert!(bad_flip.validate().is_err());
    }

    #[test]
    fn sampling_is_deterministic_for_fixed_seed() {
        let cfg = TransformConfig::default();
        let draw = |seed: u64| {
            let mut rng = StdRng::seed_from_u64(seed);
            (0..16)
                .map(|_| sample_transform(&mut rng, &cfg, 512, 1024).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }
}
