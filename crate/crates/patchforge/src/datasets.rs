//! Data loading: an in-memory synthetic-shapes dataset for desk-scale runs
//! and a lazy reader for the standard urban-scenes directory layout
//! (`leftImg8bit/<split>/<city>/*_leftImg8bit.png` paired with
//! `gtFine/.../*_gtFine_labelTrainIds.png`, 19 classes, ignore index 255).
//!
//! Synthetic images are quantized to the 8-bit grid at generation time, so
//! materializing them as PNG files and reading them back through the layout
//! reader is bit-lossless — the two code paths are interchangeable.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset config error: {0}")]
    Config(String),
    #[error("image without matching label: {id}")]
    MissingPair { id: String },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One image/label pair. Image values are unit RGB; label values are class
/// ids in `0..num_classes` or the ignore index.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub image: Array3<f32>,
    pub label: Array2<u8>,
    pub id: String,
}

enum Source {
    Memory(Vec<SampleRecord>),
    Files(Vec<FilePair>),
}

struct FilePair {
    id: String,
    image: PathBuf,
    label: PathBuf,
}

/// A dataset handle: either fully in memory (synthetic) or a list of file
/// pairs decoded on demand (disk layouts never fit in memory at full scale).
pub struct Dataset {
    source: Source,
    pub num_classes: usize,
    pub ignore_index: u8,
}

impl Dataset {
    pub fn from_records(
        records: Vec<SampleRecord>,
        num_classes: usize,
        ignore_index: u8,
    ) -> Self {
        Self {
            source: Source::Memory(records),
            num_classes,
            ignore_index,
        }
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Memory(v) => v.len(),
            Source::Files(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<String> {
        match &self.source {
            Source::Memory(v) => v.iter().map(|r| r.id.clone()).collect(),
            Source::Files(v) => v.iter().map(|p| p.id.clone()).collect(),
        }
    }

    /// Fetch one record (cloned from memory, or decoded from disk).
    pub fn get(&self, index: usize) -> Result<SampleRecord, DatasetError> {
        match &self.source {
            Source::Memory(v) => v
                .get(index)
                .cloned()
                .ok_or_else(|| DatasetError::Config(format!("index {index} out of range"))),
            Source::Files(v) => {
                let pair = v
                    .get(index)
                    .ok_or_else(|| DatasetError::Config(format!("index {index} out of range")))?;
                decode_pair(pair, self.num_classes, self.ignore_index)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

/// Flat fill colors for the non-background classes; class 0 is the dark
/// gradient background. Bright, mutually distinct, and far from the
/// background range so a small model can learn the mapping quickly.
const PALETTE: [[u8; 3]; 12] = [
    [230, 60, 60],   // class 1: rectangle
    [60, 200, 80],   // class 2: disk
    [70, 110, 235],  // class 3: triangle
    [240, 200, 40],  // class 4: rectangle
    [200, 70, 220],  // class 5: disk
    [40, 220, 220],  // class 6: triangle
    [250, 140, 30],  // class 7: rectangle
    [150, 240, 70],  // class 8: disk
    [120, 80, 230],  // class 9: triangle
    [245, 120, 170], // class 10: rectangle
    [90, 210, 150],  // class 11: disk
    [220, 220, 120], // class 12: triangle
];

/// Deterministic synthetic segmentation set: a dark background gradient
/// (class 0) with 3-6 opaque shapes per image. Each non-background class id
/// maps to a fixed shape kind (rectangle/disk/triangle cycling) and fill
/// color, and the label mask is produced by the same rasterization pass as
/// the image, so labels are pixel-exact by construction. All pixel values
/// land on the 8-bit grid `k/255`.
pub fn synth_shapes(
    n_images: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if num_classes < 2 {
        return Err(DatasetError::Config(format!(
            "synth_shapes needs >= 2 classes, got {num_classes}"
        )));
    }
    if num_classes - 1 > PALETTE.len() {
        return Err(DatasetError::Config(format!(
            "synth_shapes supports at most {} classes",
            PALETTE.len() + 1
        )));
    }
    if n_images == 0 || height < 8 || width < 8 {
        return Err(DatasetError::Config(format!(
            "invalid geometry: {n_images} images of {height}x{width}"
        )));
    }
    let records = (0..n_images)
        .map(|i| {
            // Per-image seeding keeps image i independent of n_images.
            let img_seed = seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            render_image(i, height, width, num_classes, img_seed)
        })
        .collect();
    Ok(Dataset::from_records(records, num_classes, 255))
}

fn render_image(
    index: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
) -> SampleRecord {
    let mut rng = StdRng::seed_from_u64(seed);

    // Background: dark gradient, quantized to u8 per pixel.
    let left: [f64; 3] = std::array::from_fn(|_| rng.random_range(10.0..80.0));
    let right: [f64; 3] = std::array::from_fn(|_| rng.random_range(10.0..80.0));
    let vertical: f64 = rng.random_range(0.0..40.0);
    let mut pixels = Array3::<u8>::zeros((3, height, width));
    for r in 0..height {
        for c in 0..width {
            let t = c as f64 / (width - 1) as f64;
            let v = r as f64 / (height - 1) as f64;
            for k in 0..3 {
                let value = left[k] + (right[k] - left[k]) * t + vertical * v;
                pixels[[k, r, c]] = value.round().clamp(0.0, 120.0) as u8;
            }
        }
    }
    let mut label = Array2::<u8>::zeros((height, width));

    let n_shapes = rng.random_range(3..=6);
    for _ in 0..n_shapes {
        let class = rng.random_range(1..num_classes as u8);
        let color = PALETTE[class as usize - 1];
        let cr = rng.random_range(0..height) as isize;
        let cc = rng.random_range(0..width) as isize;
        match (class - 1) % 3 {
            0 => {
                let hh = rng.random_range(8..=28) as isize;
                let hw = rng.random_range(8..=28) as isize;
                fill(&mut pixels, &mut label, class, color, |r, c| {
                    (r - cr).abs() <= hh && (c - cc).abs() <= hw
                });
            }
            1 => {
                let radius = rng.random_range(8..=26) as isize;
                fill(&mut pixels, &mut label, class, color, |r, c| {
                    (r - cr).pow(2) + (c - cc).pow(2) <= radius.pow(2)
                });
            }
            _ => {
                let h = rng.random_range(16..=48) as isize;
                let hw = rng.random_range(8..=28) as isize;
                fill(&mut pixels, &mut label, class, color, |r, c| {
                    // Upright isoceles triangle: apex at (cr, cc), width
                    // growing linearly toward the base.
                    if r < cr || r > cr + h {
                        return false;
                    }
                    let spread = hw * (r - cr) / h;
                    (c - cc).abs() <= spread
                });
            }
        }
    }

    let image = pixels.mapv(|v| v as f32 / 255.0);
    SampleRecord {
        image,
        label,
        id: format!("synth/{index:05}"),
    }
}

fn fill(
    pixels: &mut Array3<u8>,
    label: &mut Array2<u8>,
    class: u8,
    color: [u8; 3],
    inside: impl Fn(isize, isize) -> bool,
) {
    let (_, height, width) = pixels.dim();
    for r in 0..height {
        for c in 0..width {
            if inside(r as isize, c as isize) {
                for k in 0..3 {
                    pixels[[k, r, c]] = color[k];
                }
                label[[r, c]] = class;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Directory layout reader
// ---------------------------------------------------------------------------

const IMAGE_SUFFIX: &str = "_leftImg8bit.png";
const LABEL_SUFFIX: &str = "_gtFine_labelTrainIds.png";

/// Scan a standard urban-scenes tree and return a lazily-decoding dataset
/// with 19 classes and ignore index 255. Record order is lexicographic by
/// id, so iteration is deterministic before any shuffling.
pub fn load_cityscapes_layout(root: &Path, split: &str) -> Result<Dataset, DatasetError> {
    load_layout(root, split, 19, 255)
}

/// Layout reader with configurable class count, used both for the real
/// dataset and for synthetic sets materialized to disk.
pub fn load_layout(
    root: &Path,
    split: &str,
    num_classes: usize,
    ignore_index: u8,
) -> Result<Dataset, DatasetError> {
    let image_root = root.join("leftImg8bit").join(split);
    if !image_root.is_dir() {
        return Err(DatasetError::Layout(format!(
            "missing image directory {}",
            image_root.display()
        )));
    }
    let mut pairs = Vec::new();
    for entry in walkdir::WalkDir::new(&image_root).sort_by_file_name() {
        let entry = entry.map_err(|e| DatasetError::Layout(format!("walk: {e}")))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        let Some(stem) = name.strip_suffix(IMAGE_SUFFIX) else {
            continue;
        };
        let rel = entry
            .path()
            .parent()
            .and_then(|p| p.strip_prefix(&image_root).ok())
            .unwrap_or_else(|| Path::new(""));
        let id = if rel.as_os_str().is_empty() {
            stem.to_string()
        } else {
            format!("{}/{stem}", rel.display())
        };
        let label = root
            .join("gtFine")
            .join(split)
            .join(rel)
            .join(format!("{stem}{LABEL_SUFFIX}"));
        if !label.is_file() {
            return Err(DatasetError::MissingPair { id });
        }
        pairs.push(FilePair {
            id,
            image: entry.path().to_path_buf(),
            label,
        });
    }
    if pairs.is_empty() {
        return Err(DatasetError::Layout(format!(
            "no {IMAGE_SUFFIX} files under {}",
            image_root.display()
        )));
    }
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Dataset {
        source: Source::Files(pairs),
        num_classes,
        ignore_index,
    })
}

fn decode_pair(
    pair: &FilePair,
    num_classes: usize,
    ignore_index: u8,
) -> Result<SampleRecord, DatasetError> {
    let img = image::open(&pair.image)
        .map_err(|e| DatasetError::Layout(format!("{}: {e}", pair.image.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let image = Array3::from_shape_fn((3, h as usize, w as usize), |(k, r, c)| {
        img.get_pixel(c as u32, r as u32)[k] as f32 / 255.0
    });

    let label_img = image::open(&pair.label)
        .map_err(|e| DatasetError::Layout(format!("{}: {e}", pair.label.display())))?;
    let image::DynamicImage::ImageLuma8(gray) = label_img else {
        return Err(DatasetError::Layout(format!(
            "{}: labels must be 8-bit grayscale",
            pair.label.display()
        )));
    };
    if gray.dimensions() != (w, h) {
        return Err(DatasetError::Layout(format!(
            "{}: label size {:?} does not match image {:?}",
            pair.label.display(),
            gray.dimensions(),
            (w, h)
        )));
    }
    let label = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        gray.get_pixel(c as u32, r as u32)[0]
    });
    if let Some(bad) = label
        .iter()
        .find(|v| **v != ignore_index && **v as usize >= num_classes)
    {
        return Err(DatasetError::Layout(format!(
            "{}: label value {bad} outside 0..{num_classes} and not ignore ({ignore_index})",
            pair.label.display()
        )));
    }
    Ok(SampleRecord {
        image,
        label,
        id: pair.id.clone(),
    })
}

/// Write a dataset to disk in the standard layout so it can be re-read by
/// [`load_layout`]. Images are quantized with round(255*v) — lossless for
/// synthetic sets, which are generated on the 8-bit grid.
pub fn materialize(dataset: &Dataset, root: &Path, split: &str) -> Result<(), DatasetError> {
    for index in 0..dataset.len() {
        let record = dataset.get(index)?;
        let (id, city) = match record.id.rsplit_once('/') {
            Some((city, stem)) => (stem.to_string(), city.replace('/', "_")),
            None => (record.id.clone(), "all".to_string()),
        };
        let img_dir = root.join("leftImg8bit").join(split).join(&city);
        let lab_dir = root.join("gtFine").join(split).join(&city);
        fs::create_dir_all(&img_dir)?;
        fs::create_dir_all(&lab_dir)?;

        let (_, h, w) = record.image.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for r in 0..h {
            for c in 0..w {
                let px = [
                    (record.image[[0, r, c]] * 255.0).round() as u8,
                    (record.image[[1, r, c]] * 255.0).round() as u8,
                    (record.image[[2, r, c]] * 255.0).round() as u8,
                ];
                img.put_pixel(c as u32, r as u32, image::Rgb(px));
            }
        }
        img.save(img_dir.join(format!("{id}{IMAGE_SUFFIX}")))
            .map_err(|e| DatasetError::Layout(format!("write image: {e}")))?;

        let mut lab = image::GrayImage::new(w as u32, h as u32);
        for r in 0..h {
            for c in 0..w {
                lab.put_pixel(c as u32, r as u32, image::Luma([record.label[[r, c]]]));
            }
        }
        lab.save(lab_dir.join(format!("{id}{LABEL_SUFFIX}")))
            .map_err(|e| DatasetError::Layout(format!("write label: {e}")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Index batches for one epoch: a shuffle keyed by (seed, epoch), chunked by
/// batch size, final partial batch included.
pub fn epoch_batches(
    n_records: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n_records).collect();
    let mut rng = StdRng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F).wrapping_add(1),
    );
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Materialized record batches for one epoch.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<SampleRecord>>, DatasetError> {
    epoch_batches(dataset.len(), batch_size, seed, epoch)
        .into_iter()
        .map(|idxs| idxs.into_iter().map(|i| dataset.get(i)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn synth_is_bit_deterministic() {
        let a = synth_shapes(3, 32, 64, 6, 9).unwrap();
        let b = synth_shapes(3, 32, 64, 6, 9).unwrap();
        for i in 0..3 {
            let ra = a.get(i).unwrap();
            let rb = b.get(i).unwrap();
            assert_eq!(
                ra.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                rb.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(ra.label, rb.label);
            assert_eq!(ra.id, rb.id);
        }
    }

    #[test]
    fn synth_labels_are_in_range_without_ignore() {
        let ds = synth_shapes(5, 32, 64, 6, 1).unwrap();
        for i in 0..ds.len() {
            let r = ds.get(i).unwrap();
            assert!(r.label.iter().all(|v| (*v as usize) < 6));
            assert!(r.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn synth_pixels_sit_on_the_8bit_grid() {
        let ds = synth_shapes(2, 32, 64, 6, 3).unwrap();
        let r = ds.get(0).unwrap();
        for v in r.image.iter() {
            let scaled = v * 255.0;
            assert!(
                (scaled - scaled.round()).abs() < 1e-6,
                "value {v} is not k/255"
            );
        }
    }

    #[test]
    fn synth_label_matches_rendered_color_exactly() {
        let ds = synth_shapes(4, 64, 128, 6, 7).unwrap();
        for i in 0..ds.len() {
            let r = ds.get(i).unwrap();
            let (_, h, w) = r.image.dim();
            for row in 0..h {
                for col in 0..w {
                    let class = r.label[[row, col]];
                    if class == 0 {
                        continue;
                    }
                    let expected = PALETTE[class as usize - 1];
                    for k in 0..3 {
                        let v = (r.image[[k, row, col]] * 255.0).round() as u8;
                        assert_eq!(v, expected[k], "id {} pixel ({row},{col})", r.id);
                    }
                }
            }
        }
    }

    #[test]
    fn synth_every_class_is_well_represented() {
        // 500 images at default geometry; every non-background class should
        // occupy at least 1% of all pixels.
        let ds = synth_shapes(500, 128, 256, 6, 0).unwrap();
        let mut counts = [0u64; 6];
        let mut total = 0u64;
        for i in 0..ds.len() {
            let r = ds.get(i).unwrap();
            for v in r.label.iter() {
                counts[*v as usize] += 1;
                total += 1;
            }
        }
        for (class, count) in counts.iter().enumerate().skip(1) {
            let share = *count as f64 / total as f64;
            assert!(share >= 0.01, "class {class} share {share:.4}");
        }
    }

    #[test]
    fn synth_rejects_bad_configs() {
        assert!(matches!(
            synth_shapes(2, 32, 64, 1, 0),
            Err(DatasetError::Config(_))
        ));
        assert!(matches!(
            synth_shapes(0, 32, 64, 6, 0),
            Err(DatasetError::Config(_))
        ));
        assert!(matches!(
            synth_shapes(2, 32, 64, 40, 0),
            Err(DatasetError::Config(_))
        ));
    }

    fn write_fixture_pair(root: &Path, split: &str, city: &str, stem: &str, label_value: u8) {
        let img_dir = root.join("leftImg8bit").join(split).join(city);
        let lab_dir = root.join("gtFine").join(split).join(city);
        fs::create_dir_all(&img_dir).unwrap();
        fs::create_dir_all(&lab_dir).unwrap();
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([100, 150, 200]));
        img.save(img_dir.join(format!("{stem}{IMAGE_SUFFIX}"))).unwrap();
        let lab = image::GrayImage::from_pixel(4, 4, image::Luma([label_value]));
        lab.save(lab_dir.join(format!("{stem}{LABEL_SUFFIX}"))).unwrap();
    }

    #[test]
    fn layout_reader_finds_sorted_pairs() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_pair(dir.path(), "val", "btown", "btown_000001", 3);
        write_fixture_pair(dir.path(), "val", "atown", "atown_000001", 255);
        let ds = load_cityscapes_layout(dir.path(), "val").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(
            ds.ids(),
            vec!["atown/atown_000001".to_string(), "btown/btown_000001".to_string()]
        );
        let rec = ds.get(0).unwrap();
        assert_eq!(rec.image.dim(), (3, 4, 4));
        assert!((rec.image[[0, 0, 0]] - 100.0 / 255.0).abs() < 1e-6);
        assert_eq!(rec.label[[0, 0]], 255);
        assert_eq!(ds.num_classes, 19);
    }

    #[test]
    fn missing_label_names_the_offending_id() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_pair(dir.path(), "train", "ctown", "ctown_000001", 0);
        // Second image with no label file.
        let img_dir = dir.path().join("leftImg8bit/train/ctown");
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 3]));
        img.save(img_dir.join(format!("ctown_000002{IMAGE_SUFFIX}")))
            .unwrap();
        match load_cityscapes_layout(dir.path(), "train") {
            Err(DatasetError::MissingPair { id }) => {
                assert_eq!(id, "ctown/ctown_000002");
            }
            other => panic!("expected MissingPair, got {other:?}", other = other.err()),
        }
    }

    #[test]
    fn out_of_range_label_values_fail_loudly() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_pair(dir.path(), "val", "dtown", "dtown_000001", 200);
        let ds = load_cityscapes_layout(dir.path(), "val").unwrap();
        assert!(matches!(ds.get(0), Err(DatasetError::Layout(_))));
    }

    #[test]
    fn missing_root_is_a_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_cityscapes_layout(&dir.path().join("nope"), "val"),
            Err(DatasetError::Layout(_))
        ));
    }

    #[test]
    fn materialized_synth_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_shapes(3, 32, 64, 6, 5).unwrap();
        materialize(&ds, dir.path(), "train").unwrap();
        let back = load_layout(dir.path(), "train", 6, 255).unwrap();
        assert_eq!(back.len(), 3);
        for i in 0..3 {
            let a = ds.get(i).unwrap();
            let b = back.get(i).unwrap();
            assert_eq!(
                a.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "image {i} not lossless"
            );
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn batch_sizes_follow_partial_final_batch_rule() {
        let sizes: Vec<usize> = epoch_batches(5, 2, 0, 0).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let all: BTreeSet<usize> = epoch_batches(5, 2, 0, 0).into_iter().flatten().collect();
        assert_eq!(all.len(), 5, "every index appears exactly once");
    }

    #[test]
    fn same_seed_and_epoch_reproduce_the_order() {
        assert_eq!(epoch_batches(100, 7, 3, 4), epoch_batches(100, 7, 3, 4));
    }

    #[test]
    fn different_epochs_give_distinct_permutations() {
        let mut seen = BTreeSet::new();
        for epoch in 0..10 {
            let perm: Vec<usize> = epoch_batches(100, 100, 11, epoch)
                .into_iter()
                .flatten()
                .collect();
            assert!(seen.insert(perm), "epoch {epoch} repeated a permutation");
        }
    }

    #[test]
    fn record_batches_materialize() {
        let ds = synth_shapes(5, 16, 16, 4, 2).unwrap();
        let bs = batches(&ds, 2, 0, 0).unwrap();
        assert_eq!(bs.len(), 3);
        assert_eq!(bs[0].len(), 2);
        assert_eq!(bs[2].len(), 1);
    }
}
