//! Dataset plumbing: annotation rasterization, blur synthesis by frame
//! averaging, scale pyramids, and balanced patch sampling.
//!
//! On-disk layout:
//! ```text
//! root/{train,test}/blur/*.png
//! root/{train,test}/sharp/*.png
//! root/{train,test}/annotations/*.json
//! ```
//! Annotation record: `{"image": "<name>.png", "width": W, "height": H,
//! "boxes": [[x0,y0,x1,y1], ...]}` with half-open integer coordinates.
//! Pairs without an annotation file get an empty box list and an all-zero
//! mask; their FG loss term vanishes, so they train the BG decoder only.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::img::{BinaryMask, ImagePlane};
use crate::{Error, Result};

/// Half-open integer pixel box `[x0,x1) x [y0,y1)`. Coordinates may extend
/// outside the image; rasterization clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BoundingBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Clip to `[0,width) x [0,height)`; `None` if nothing remains.
    pub fn clipped(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let x0 = self.x0.max(0) as usize;
        let y0 = self.y0.max(0) as usize;
        let x1 = self.x1.min(width as i64).max(0) as usize;
        let y1 = self.y1.min(height as i64).max(0) as usize;
        if x0 < x1 && y0 < y1 {
            Some((x0, y0, x1, y1))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnnotatedSample {
    pub blurred: ImagePlane,
    pub sharp: ImagePlane,
    pub boxes: Vec<BoundingBox>,
    pub mask: BinaryMask,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<[i64; 4]>,
}

/// Union-rasterize boxes into a binary mask. Overlaps are idempotent;
/// boxes that are degenerate after clipping are dropped.
pub fn rasterize_mask(boxes: &[BoundingBox], width: usize, height: usize) -> Result<BinaryMask> {
    if width == 0 || height == 0 {
        return Err(Error::arg("mask dimensions must be positive"));
    }
    let mut mask = BinaryMask::zeros(width, height);
    for b in boxes {
        if let Some((x0, y0, x1, y1)) = b.clipped(width, height) {
            for y in y0..y1 {
                for x in x0..x1 {
                    mask.set(x, y, 1);
                }
            }
        }
    }
    Ok(mask)
}

/// Average an odd window of frames into a blurred image; the central frame
/// is kept as the sharp counterpart.
pub fn synthesize_blur(frames: &[ImagePlane]) -> Result<(ImagePlane, ImagePlane)> {
    let n = frames.len();
    if n < 3 || n % 2 == 0 {
        return Err(Error::arg(format!(
            "frame window must be odd and >= 3, got {n}"
        )));
    }
    let first = &frames[0];
    for f in &frames[1..] {
        if !f.same_shape(first) {
            return Err(Error::dims("frames differ in dimensions"));
        }
    }
    let mut acc = vec![0.0f64; first.data.len()];
    for f in frames {
        for (a, &v) in acc.iter_mut().zip(&f.data) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / n as f64;
    let blurred = ImagePlane {
        width: first.width,
        height: first.height,
        channels: first.channels,
        data: acc.iter().map(|&a| (a * inv) as f32).collect(),
    };
    Ok((blurred, frames[n / 2].clone()))
}

/// Required divisor of both image dimensions for a given scale count:
/// each scale halves, and each scale's encoder reduces by another 4x.
pub fn pyramid_divisor(scales: usize) -> usize {
    (1 << (scales - 1)) * 4
}

/// Coarse-to-fine pyramid of area-averaged images; the finest level is the
/// input itself.
pub fn build_pyramid(img: &ImagePlane, scales: usize) -> Result<Vec<ImagePlane>> {
    if scales == 0 {
        return Err(Error::arg("scales must be >= 1"));
    }
    let div = pyramid_divisor(scales);
    if img.width % div != 0 || img.height % div != 0 {
        return Err(Error::arg(format!(
            "image {}x{} not divisible by {div} (required for {scales} scales)",
            img.width, img.height
        )));
    }
    let mut levels = Vec::with_capacity(scales);
    for s in 0..scales {
        let factor = 1 << (scales - 1 - s);
        levels.push(if factor == 1 {
            img.clone()
        } else {
            img.area_downsample(factor)?
        });
    }
    Ok(levels)
}

/// Block-wise mask reduction: output pixel is 1 iff the mean of its
/// `factor x factor` block is >= 0.5 (ties round to 1).
pub fn downsample_mask(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    if factor == 0 {
        return Err(Error::arg("factor must be positive"));
    }
    if mask.width % factor != 0 || mask.height % factor != 0 {
        return Err(Error::arg(format!(
            "mask {}x{} not divisible by factor {factor}",
            mask.width, mask.height
        )));
    }
    let (w, h) = (mask.width / factor, mask.height / factor);
    let half = factor * factor; // block sum * 2 >= block size <=> mean >= 0.5
    let mut out = BinaryMask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0usize;
            for dy in 0..factor {
                for dx in 0..factor {
                    sum += mask.get(x * factor + dx, y * factor + dy) as usize;
                }
            }
            out.set(x, y, (2 * sum >= half) as u8);
        }
    }
    Ok(out)
}

/// Coarse-to-fine pyramid of binary masks matching [`build_pyramid`].
pub fn build_mask_pyramid(mask: &BinaryMask, scales: usize) -> Result<Vec<BinaryMask>> {
    let mut levels = Vec::with_capacity(scales);
    for s in 0..scales {
        let factor = 1 << (scales - 1 - s);
        levels.push(if factor == 1 {
            mask.clone()
        } else {
            downsample_mask(mask, factor)?
        });
    }
    Ok(levels)
}

const FG_RETRY_LIMIT: usize = 32;

/// A square crop of (blurred, sharp, mask) at a shared location. With
/// `require_fg`, rejection-samples until the mask patch is non-empty, then
/// falls back to a crop centred on a random box.
pub fn sample_patch(
    sample: &AnnotatedSample,
    size: usize,
    rng: &mut impl Rng,
    require_fg: bool,
) -> Result<(ImagePlane, ImagePlane, BinaryMask)> {
    let (w, h) = (sample.blurred.width, sample.blurred.height);
    if w < size || h < size {
        return Err(Error::arg(format!(
            "image {w}x{h} smaller than patch size {size}"
        )));
    }
    if require_fg && sample.boxes.is_empty() {
        return Err(Error::arg(format!(
            "require_fg on boxless sample {}",
            sample.source_id
        )));
    }
    let (max_x, max_y) = (w - size, h - size);
    let pick = |rng: &mut dyn rand::RngCore| {
        let x = rng.gen_range(0..=max_x);
        let y = rng.gen_range(0..=max_y);
        (x, y)
    };
    let (mut x, mut y) = pick(rng);
    if require_fg {
        let mut tries = 0;
        while sample.mask.crop(x, y, size).count_ones() == 0 {
            tries += 1;
            if tries >= FG_RETRY_LIMIT {
                // Centre the crop on a random annotated box.
                let b = sample.boxes[rng.gen_range(0..sample.boxes.len())];
                let cx = ((b.x0 + b.x1) / 2).max(0) as usize;
                let cy = ((b.y0 + b.y1) / 2).max(0) as usize;
                x = cx.saturating_sub(size / 2).min(max_x);
                y = cy.saturating_sub(size / 2).min(max_y);
                break;
            }
            let p = pick(rng);
            x = p.0;
            y = p.1;
        }
    }
    Ok((
        sample.blurred.crop(x, y, size),
        sample.sharp.crop(x, y, size),
        sample.mask.crop(x, y, size),
    ))
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn read_annotation(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = fs::read_to_string(path)?;
    let record: AnnotationRecord =
        serde_json::from_str(&text).map_err(|e| Error::MalformedAnnotation {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(record
        .boxes
        .iter()
        .map(|&[x0, y0, x1, y1]| BoundingBox::new(x0, y0, x1, y1))
        .collect())
}

/// Load one split of the dataset in deterministic (sorted-name) order.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<AnnotatedSample>> {
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::MissingSplit(split_dir));
    }
    let blur_dir = split_dir.join("blur");
    let sharp_dir = split_dir.join("sharp");
    let ann_dir = split_dir.join("annotations");
    if !blur_dir.is_dir() || !sharp_dir.is_dir() {
        return Err(Error::MissingSplit(blur_dir));
    }
    let mut samples = Vec::new();
    for name in png_names(&blur_dir)? {
        let blur_path = blur_dir.join(&name);
        let sharp_path = sharp_dir.join(&name);
        if !sharp_path.is_file() {
            return Err(Error::NameMismatch(blur_path));
        }
        let blurred = ImagePlane::load_png(&blur_path)?;
        let sharp = ImagePlane::load_png(&sharp_path)?;
        if !blurred.same_shape(&sharp) {
            return Err(Error::dims(format!(
                "{} differs in size between blur and sharp",
                name
            )));
        }
        let ann_path = ann_dir.join(annotation_name(&name));
        let boxes = if ann_path.is_file() {
            read_annotation(&ann_path)?
        } else {
            Vec::new()
        };
        let mask = rasterize_mask(&boxes, blurred.width, blurred.height)?;
        samples.push(AnnotatedSample {
            blurred,
            sharp,
            boxes,
            mask,
            source_id: name,
        });
    }
    Ok(samples)
}

pub fn annotation_name(image_name: &str) -> PathBuf {
    PathBuf::from(image_name).with_extension("json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rasterize_empty_is_zero() {
        let mask = rasterize_mask(&[], 6, 5).unwrap();
        assert_eq!(mask.count_ones(), 0);
        assert_eq!((mask.width, mask.height), (6, 5));
    }

    #[test]
    fn rasterize_single_box_area() {
        // 3x3 pixels covered: x in {2,3,4}, y in {1,2,3}
        let mask = rasterize_mask(&[BoundingBox::new(2, 1, 5, 4)], 6, 5).unwrap();
        assert_eq!(mask.count_ones(), 9);
        assert_eq!(mask.get(2, 1), 1);
        assert_eq!(mask.get(4, 3), 1);
        assert_eq!(mask.get(5, 4), 0);
        assert_eq!(mask.get(1, 1), 0);
    }

    #[test]
    fn rasterize_union_idempotent() {
        let b = BoundingBox::new(1, 1, 4, 4);
        let one = rasterize_mask(&[b], 6, 5).unwrap();
        let two = rasterize_mask(&[b, b], 6, 5).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn rasterize_clips_and_drops_degenerate() {
        let mask = rasterize_mask(
            &[BoundingBox::new(-3, -3, 2, 2), BoundingBox::new(10, 0, 20, 5)],
            6,
            5,
        )
        .unwrap();
        assert_eq!(mask.count_ones(), 4);
    }

    proptest! {
        // Mask sum equals brute-force area of the clipped box union.
        #[test]
        fn rasterize_matches_enumeration(
            boxes in proptest::collection::vec((-4i64..12, -4i64..10, -4i64..12, -4i64..10), 0..5)
        ) {
            let boxes: Vec<BoundingBox> = boxes
                .into_iter()
                .map(|(x0, y0, x1, y1)| BoundingBox::new(x0, y0, x1, y1))
                .collect();
            let (w, h) = (8usize, 6usize);
            let mask = rasterize_mask(&boxes, w, h).unwrap();
            let mut expected = 0usize;
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if boxes.iter().any(|b| b.x0 <= x && x < b.x1 && b.y0 <= y && y < b.y1) {
                        expected += 1;
                    }
                }
            }
            prop_assert_eq!(mask.count_ones(), expected);
        }
    }

    #[test]
    fn synthesize_identical_frames() {
        let f = ImagePlane::from_fn(4, 4, 3, |x, y, c| ((x + y + c) % 5) as f32 / 5.0);
        let frames = vec![f.clone(); 11];
        let (blurred, sharp) = synthesize_blur(&frames).unwrap();
        assert_eq!(sharp, f);
        for (a, b) in blurred.data.iter().zip(&f.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn synthesize_mean_and_center() {
        // ten zero frames and one one-frame; the centre frame is zero
        let mut frames = vec![ImagePlane::zeros(2, 2, 1); 11];
        frames[0] = ImagePlane::constant(2, 2, 1, 1.0);
        let (blurred, sharp) = synthesize_blur(&frames).unwrap();
        for &v in &blurred.data {
            assert!((v - 1.0 / 11.0).abs() < 1e-7);
        }
        assert!(sharp.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_rejects_even_window() {
        let frames = vec![ImagePlane::zeros(2, 2, 1); 4];
        assert!(synthesize_blur(&frames).is_err());
    }

    #[test]
    fn synthesize_rejects_dim_mismatch() {
        let frames = vec![
            ImagePlane::zeros(2, 2, 1),
            ImagePlane::zeros(3, 2, 1),
            ImagePlane::zeros(2, 2, 1),
        ];
        assert!(synthesize_blur(&frames).is_err());
    }

    #[test]
    fn synthesize_commutes_with_affine() {
        let mut frames = Vec::new();
        for i in 0..5 {
            frames.push(ImagePlane::from_fn(3, 3, 1, |x, y, _| {
                (x * y + i) as f32 * 0.05
            }));
        }
        let (b, s) = synthesize_blur(&frames).unwrap();
        let mapped: Vec<ImagePlane> = frames.iter().map(|f| f.map(|v| 2.0 * v + 0.1)).collect();
        let (bm, sm) = synthesize_blur(&mapped).unwrap();
        for (a, e) in bm.data.iter().zip(&b.data) {
            assert!((a - (2.0 * e + 0.1)).abs() < 1e-5);
        }
        for (a, e) in sm.data.iter().zip(&s.data) {
            assert!((a - (2.0 * e + 0.1)).abs() < 1e-5);
        }
    }

    #[test]
    fn pyramid_shapes_and_constants() {
        let img = ImagePlane::constant(256, 256, 3, 0.3);
        let levels = build_pyramid(&img, 3).unwrap();
        assert_eq!(levels.len(), 3);
        assert_eq!((levels[0].width, levels[0].height), (64, 64));
        assert_eq!((levels[1].width, levels[1].height), (128, 128));
        assert_eq!((levels[2].width, levels[2].height), (256, 256));
        for level in &levels {
            assert!(level.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
        // finest level is the input
        assert_eq!(levels[2], img);
    }

    #[test]
    fn pyramid_rejects_indivisible() {
        let img = ImagePlane::zeros(100, 100, 3);
        let err = build_pyramid(&img, 3).unwrap_err().to_string();
        assert!(err.contains("16"), "error should name the divisor: {err}");
    }

    #[test]
    fn pyramid_upsample_reproduces_constant() {
        let img = ImagePlane::constant(64, 32, 1, 0.7);
        let levels = build_pyramid(&img, 2).unwrap();
        let up = levels[0].replicate_upsample(2);
        assert_eq!(up, img);
    }

    #[test]
    fn downsample_mask_block_rule() {
        // block with three ones -> 1; block with one one -> 0
        let mut mask = BinaryMask::zeros(4, 2);
        mask.set(0, 0, 1);
        mask.set(1, 0, 1);
        mask.set(0, 1, 1);
        mask.set(2, 0, 1);
        let down = downsample_mask(&mask, 2).unwrap();
        assert_eq!(down.get(0, 0), 1);
        assert_eq!(down.get(1, 0), 0);
    }

    #[test]
    fn downsample_mask_all_ones() {
        let down = downsample_mask(&BinaryMask::ones(8, 8), 4).unwrap();
        assert_eq!(down.count_ones(), 4);
    }

    #[test]
    fn downsample_mask_tie_rounds_up() {
        let mut mask = BinaryMask::zeros(2, 2);
        mask.set(0, 0, 1);
        mask.set(1, 1, 1);
        assert_eq!(downsample_mask(&mask, 2).unwrap().get(0, 0), 1);
    }

    fn toy_sample(boxes: Vec<BoundingBox>) -> AnnotatedSample {
        let blurred = ImagePlane::from_fn(32, 32, 3, |x, y, _| (x ^ y) as f32 / 32.0);
        let sharp = blurred.map(|v| v * 0.5);
        let mask = rasterize_mask(&boxes, 32, 32).unwrap();
        AnnotatedSample {
            blurred,
            sharp,
            boxes,
            mask,
            source_id: "toy".into(),
        }
    }

    #[test]
    fn sample_patch_deterministic() {
        let sample = toy_sample(vec![BoundingBox::new(10, 10, 20, 20)]);
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let (b1, s1, m1) = sample_patch(&sample, 16, &mut r1, true).unwrap();
        let (b2, s2, m2) = sample_patch(&sample, 16, &mut r2, true).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(s1, s2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn sample_patch_fg_postcondition() {
        let sample = toy_sample(vec![BoundingBox::new(14, 14, 18, 18)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (_, _, mask) = sample_patch(&sample, 8, &mut rng, true).unwrap();
            assert!(mask.count_ones() >= 1);
        }
    }

    #[test]
    fn sample_patch_boxless() {
        let sample = toy_sample(vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, mask) = sample_patch(&sample, 8, &mut rng, false).unwrap();
        assert_eq!(mask.count_ones(), 0);
        assert!(sample_patch(&sample, 8, &mut rng, true).is_err());
    }

    #[test]
    fn sample_patch_rejects_oversize() {
        let sample = toy_sample(vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_patch(&sample, 64, &mut rng, false).is_err());
    }
}
