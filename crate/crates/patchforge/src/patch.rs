//! The adversarial patch: a `[3, h, w]` block of unit-RGB pixels, the
//! masking/padding operator that pastes it into an image, value clipping,
//! and the on-disk artifact format.
//!
//! Patch values live in `[0, 1]` (unit RGB). Model-specific normalization is
//! an adapter concern; the patch itself is the same physical pixels for every
//! model it is evaluated against.

use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use ndarray::Array3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PATCH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("patch {patch_h}x{patch_w} exceeds image {image_h}x{image_w}")]
    PatchTooLarge {
        patch_h: usize,
        patch_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("artifact format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Half-open pixel rectangle `[row0, row1) x [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Region {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row0 && r < self.row1 && c >= self.col0 && c < self.col1
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }
}

/// Training provenance carried with every patch artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub format_version: u32,
    /// Name of the model the patch was optimized against, or "random".
    pub source_model: String,
    pub train_epochs: u32,
    pub step_size: f64,
    pub seed: u64,
    pub created_utc: DateTime<Utc>,
}

impl PatchMeta {
    pub fn random(seed: u64) -> Self {
        Self {
            format_version: PATCH_FORMAT_VERSION,
            source_model: "random".to_string(),
            train_epochs: 0,
            step_size: 0.0,
            seed,
            created_utc: Utc::now(),
        }
    }
}

/// Adversarial patch: `values` has shape `[3, h, w]` with every entry in
/// `[0, 1]`. Immutable after construction; optimization steps build new
/// patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Array3<f32>,
    pub meta: PatchMeta,
}

impl Patch {
    /// Validating constructor: enforces the shape and `[0, 1]` invariants.
    pub fn new(values: Array3<f32>, meta: PatchMeta) -> Result<Self, PatchError> {
        let (ch, h, w) = values.dim();
        if ch != 3 || h == 0 || w == 0 {
            return Err(PatchError::Domain(format!(
                "patch shape must be [3, h>=1, w>=1], got [{ch}, {h}, {w}]"
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PatchError::Domain(
                "patch values must lie in [0, 1]".to_string(),
            ));
        }
        Ok(Self { values, meta })
    }

    /// Non-validating constructor for transient optimizer states whose
    /// values may leave `[0, 1]` before clipping.
    pub fn unchecked(values: Array3<f32>, meta: PatchMeta) -> Self {
        Self { values, meta }
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }
}

/// Where a patch is pasted. Only center placement is in scope; the enum
/// leaves room for other modes without an API break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementSpec {
    #[default]
    Center,
}

impl PlacementSpec {
    /// Resolve the pixel rectangle the patch occupies inside an
    /// `image_h x image_w` image.
    pub fn resolved_region(
        &self,
        image_h: usize,
        image_w: usize,
        patch_h: usize,
        patch_w: usize,
    ) -> Result<Region, PatchError> {
        if patch_h > image_h || patch_w > image_w {
            return Err(PatchError::PatchTooLarge {
                patch_h,
                patch_w,
                image_h,
                image_w,
            });
        }
        match self {
            PlacementSpec::Center => {
                let row0 = (image_h - patch_h) / 2;
                let col0 = (image_w - patch_w) / 2;
                Ok(Region {
                    row0,
                    col0,
                    row1: row0 + patch_h,
                    col1: col0 + patch_w,
                })
            }
        }
    }
}

/// Paste the patch into a copy of the image: pixels inside the resolved
/// region are replaced by the patch values, everything else is bit-identical
/// to the input.
pub fn apply_patch(
    image: &Array3<f32>,
    patch: &Patch,
    placement: PlacementSpec,
) -> Result<(Array3<f32>, Region), PatchError> {
    let (ch, h, w) = image.dim();
    if ch != 3 {
        return Err(PatchError::Domain(format!(
            "image must have 3 channels, got {ch}"
        )));
    }
    if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(PatchError::Domain(
            "image values must lie in [0, 1]".to_string(),
        ));
    }
    let region = placement.resolved_region(h, w, patch.height(), patch.width())?;
    let mut out = image.clone();
    let mut slice = out.slice_mut(ndarray::s![
        ..,
        region.row0..region.row1,
        region.col0..region.col1
    ]);
    slice.assign(&patch.values);
    Ok((out, region))
}

/// Clamp every value to `[0, 1]`. Idempotent and elementwise monotone.
pub fn clip_patch(patch: &Patch) -> Patch {
    let values = patch.values.mapv(|v| v.clamp(0.0, 1.0));
    Patch {
        values,
        meta: patch.meta.clone(),
    }
}

/// Seeded uniform-noise patch; the Table-style random baseline.
pub fn random_patch(h: usize, w: usize, seed: u64) -> Patch {
    assert!(h >= 1 && w >= 1, "patch dimensions must be >= 1");
    let mut rng = StdRng::seed_from_u64(seed);
    let values = Array3::from_shape_simple_fn((3, h, w), || rng.random::<f32>());
    Patch {
        values,
        meta: PatchMeta::random(seed),
    }
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    format_version: u32,
    shape: [usize; 3],
    source_model: String,
    train_epochs: u32,
    step_size: f64,
    seed: u64,
    created_utc: DateTime<Utc>,
}

/// Write a patch artifact directory (conventionally named `<tag>.apf/`):
/// `meta.json`, `values.bin` (little-endian f32, `[3, h, w]` row-major) and
/// an 8-bit `preview.png` for human inspection.
pub fn save_patch(patch: &Patch, dir: &Path) -> Result<(), PatchError> {
    fs::create_dir_all(dir)?;
    let (ch, h, w) = patch.values.dim();
    let meta = MetaFile {
        format_version: patch.meta.format_version,
        shape: [ch, h, w],
        source_model: patch.meta.source_model.clone(),
        train_epochs: patch.meta.train_epochs,
        step_size: patch.meta.step_size,
        seed: patch.meta.seed,
        created_utc: patch.meta.created_utc,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| PatchError::Format(format!("meta encode: {e}")))?;
    fs::write(dir.join("meta.json"), json)?;

    let mut bytes = Vec::with_capacity(ch * h * w * 4);
    // Standard layout is row-major [3, h, w]; iteration order matches.
    for v in patch.values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("values.bin"), bytes)?;

    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = [
                (patch.values[[0, r, c]] * 255.0).round() as u8,
                (patch.values[[1, r, c]] * 255.0).round() as u8,
                (patch.values[[2, r, c]] * 255.0).round() as u8,
            ];
            img.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    img.save(dir.join("preview.png"))
        .map_err(|e| PatchError::Format(format!("preview encode: {e}")))?;
    Ok(())
}

/// Read a patch artifact back. The preview image is never read.
pub fn load_patch(dir: &Path) -> Result<Patch, PatchError> {
    let meta_raw = fs::read_to_string(dir.join("meta.json"))?;
    let meta: MetaFile = serde_json::from_str(&meta_raw)
        .map_err(|e| PatchError::Format(format!("meta decode: {e}")))?;
    if meta.format_version != PATCH_FORMAT_VERSION {
        return Err(PatchError::Format(format!(
            "unsupported format_version {} (expected {PATCH_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let [ch, h, w] = meta.shape;
    if ch != 3 || h == 0 || w == 0 {
        return Err(PatchError::Format(format!(
            "invalid shape [{ch}, {h}, {w}] in meta.json"
        )));
    }
    let bytes = fs::read(dir.join("values.bin"))?;
    let expected = ch * h * w * 4;
    if bytes.len() != expected {
        return Err(PatchError::Format(format!(
            "values.bin has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if floats.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(PatchError::Format(
            "values.bin contains entries outside [0, 1]".to_string(),
        ));
    }
    let values = Array3::from_shape_vec((ch, h, w), floats)
        .map_err(|e| PatchError::Format(format!("values reshape: {e}")))?;
    Ok(Patch {
        values,
        meta: PatchMeta {
            format_version: meta.format_version,
            source_model: meta.source_model,
            train_epochs: meta.train_epochs,
            step_size: meta.step_size,
            seed: meta.seed,
            created_utc: meta.created_utc,
        },
    })
}
