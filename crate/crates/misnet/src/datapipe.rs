//! Dataset plumbing: image IO, the train/val/test manifest, plan-based
//! augmentation with mask morphology jitter, and a synthetic blob dataset
//! for smoke training.

use crate::config::AugmentationConfig;
use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear_plane, resize_nearest_plane};
use crate::types::{BinaryMask, ProbMap};
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

/// Loads any supported image as a grayscale plane in [0, 1].
pub fn load_gray_plane(path: &Path) -> Result<Array2<f64>> {
    let gray = open_image(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        gray.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0
    }))
}

/// Loads an RGB image as a (3, H, W) array in [0, 1].
pub fn load_rgb_planes(path: &Path) -> Result<Array3<f64>> {
    let rgb = open_image(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        rgb.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0
    }))
}

/// Loads a mask image; 8-bit values of 128 and above count as foreground.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let gray = open_image(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    BinaryMask::new(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        if gray.get_pixel(j as u32, i as u32).0[0] >= 128 { 1.0 } else { 0.0 }
    }))
}

/// Loads a prediction image as a probability map.
pub fn load_prob_map(path: &Path) -> Result<ProbMap> {
    ProbMap::new(load_gray_plane(path)?)
}

/// Saves a [0, 1] plane as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, plane: &Array2<f64>) -> Result<()> {
    let (h, w) = plane.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = (plane[[i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

/// Saves a (3, H, W) [0, 1] array as an RGB PNG.
pub fn save_rgb_png(path: &Path, planes: &Array3<f64>) -> Result<()> {
    let (c, h, w) = planes.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [
                (planes[[0, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (planes[[1, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (planes[[2, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

/// Which portion of the corpus a pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::dataset(format!("unknown split `{other}`"))),
        }
    }
}

/// One image/mask pair with its split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestPair {
    pub split: Split,
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// The corpus listing: every pair, sorted by stem, with a deterministic
/// 80/10/10 split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub dataset_id: String,
    pub pairs: Vec<ManifestPair>,
}

/// 80/10/10 by integer division; the remainder lands in test.
pub(crate) fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::dataset(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
        if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|x| x.to_str())
            .ok_or_else(|| Error::dataset(format!("unreadable name {}", path.display())))?
            .to_string();
        if out.insert(stem.clone(), path.clone()).is_some() {
            return Err(Error::dataset(format!("duplicate stem {stem} in {}", dir.display())));
        }
    }
    Ok(out)
}

impl DatasetManifest {
    pub fn pairs_for(&self, split: Split) -> Vec<&ManifestPair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |s| self.pairs.iter().filter(|p| p.split == s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }

    pub fn cache_path(root: &Path) -> PathBuf {
        root.join("manifest.tsv")
    }

    /// `split<TAB>image<TAB>mask` lines, paths relative to the root.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let rel = |path: &Path| {
                path.strip_prefix(&self.root)
                    .unwrap_or(path)
                    .to_string_lossy()
                    .into_owned()
            };
            out.push_str(&format!("{}\t{}\t{}\n", p.split.as_str(), rel(&p.image), rel(&p.mask)));
        }
        out
    }

    pub fn from_tsv(root: &Path, dataset_id: &str, text: &str) -> Result<DatasetManifest> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(split), Some(img), Some(mask)) = (cols.next(), cols.next(), cols.next())
            else {
                return Err(Error::dataset(format!(
                    "manifest line {}: expected split<TAB>image<TAB>mask",
                    lineno + 1
                )));
            };
            let image = root.join(img);
            let stem = image
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::dataset(format!("manifest line {}: bad stem", lineno + 1)))?
                .to_string();
            pairs.push(ManifestPair {
                split: Split::parse(split)?,
                stem,
                image,
                mask: root.join(mask),
            });
        }
        if pairs.is_empty() {
            return Err(Error::dataset("manifest is empty".to_string()));
        }
        Ok(DatasetManifest { root: root.to_path_buf(), dataset_id: dataset_id.to_string(), pairs })
    }
}

/// Scans `<root>/images` and `<root>/masks`, pairs files by stem, and
/// assigns a deterministic shuffled 80/10/10 split.
pub fn build_manifest(root: &Path, split_seed: u64) -> Result<DatasetManifest> {
    let images = list_stems(&root.join("images"))?;
    let masks = list_stems(&root.join("masks"))?;
    for stem in images.keys() {
        if !masks.contains_key(stem) {
            return Err(Error::dataset(format!("image {stem} has no mask")));
        }
    }
    for stem in masks.keys() {
        if !images.contains_key(stem) {
            return Err(Error::dataset(format!("mask {stem} has no image")));
        }
    }
    if images.is_empty() {
        return Err(Error::dataset(format!("no image pairs under {}", root.display())));
    }
    let stems: Vec<&String> = images.keys().collect();
    let n = stems.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    // Fisher-Yates so membership depends only on the seed
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let (n_train, n_val, _) = split_counts(n);
    let mut split_of = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        split_of[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let pairs = stems
        .iter()
        .enumerate()
        .map(|(i, stem)| ManifestPair {
            split: split_of[i],
            stem: (*stem).clone(),
            image: images[*stem].clone(),
            mask: masks[*stem].clone(),
        })
        .collect();
    let dataset_id = root
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("custom")
        .to_string();
    Ok(DatasetManifest { root: root.to_path_buf(), dataset_id, pairs })
}

/// Returns the cached manifest if present, otherwise builds and caches one.
pub fn load_or_build_manifest(root: &Path, split_seed: u64, refresh: bool) -> Result<DatasetManifest> {
    let cache = DatasetManifest::cache_path(root);
    let dataset_id = root.file_name().and_then(|s| s.to_str()).unwrap_or("custom").to_string();
    if !refresh && cache.is_file() {
        let text = std::fs::read_to_string(&cache)?;
        return DatasetManifest::from_tsv(root, &dataset_id, &text);
    }
    let manifest = build_manifest(root, split_seed)?;
    std::fs::write(&cache, manifest.to_tsv())?;
    Ok(manifest)
}

/// Morphology jitter direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Dilate,
    Erode,
}

fn morph_offsets(k: usize) -> std::ops::RangeInclusive<isize> {
    let anchor = (k / 2) as isize;
    -anchor..=(k as isize - 1 - anchor)
}

fn morph(plane: &Array2<f64>, k: usize, dilate: bool) -> Array2<f64> {
    let (h, w) = plane.dim();
    let offs = morph_offsets(k);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc: f64 = if dilate { 0.0 } else { 1.0 };
        for di in offs.clone() {
            for dj in offs.clone() {
                let ii = i as isize + di;
                let jj = j as isize + dj;
                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                    continue; // out-of-bounds pixels never constrain
                }
                let v = plane[[ii as usize, jj as usize]];
                acc = if dilate { acc.max(v) } else { acc.min(v) };
            }
        }
        acc
    })
}

/// Binary dilation with a k x k square element (anchor at floor(k/2)).
pub fn dilate(plane: &Array2<f64>, k: usize) -> Array2<f64> {
    morph(plane, k, true)
}

/// Binary erosion with a k x k square element (anchor at floor(k/2)).
pub fn erode(plane: &Array2<f64>, k: usize) -> Array2<f64> {
    morph(plane, k, false)
}

/// Applies morphology jitter; an erosion that would empty a nonempty mask
/// is skipped so supervision never degenerates to all-background.
pub fn apply_morph(plane: &Array2<f64>, op: MorphOp, k: usize) -> Array2<f64> {
    match op {
        MorphOp::Dilate => dilate(plane, k),
        MorphOp::Erode => {
            let eroded = erode(plane, k);
            if eroded.sum() == 0.0 && plane.sum() > 0.0 {
                plane.clone()
            } else {
                eroded
            }
        }
    }
}

/// Every random choice one augmentation makes, so the same transform can be
/// re-applied bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan {
    pub scale: f64,
    /// (top, left, side) in scaled coordinates.
    pub crop: Option<(usize, usize, usize)>,
    pub flip_h: bool,
    pub flip_v: bool,
    pub noise_std: f64,
    pub noise_seed: u64,
    pub contrast: f64,
    pub brightness: f64,
    pub sharpness: f64,
    pub morph: Option<(MorphOp, usize)>,
}

impl AugmentationPlan {
    /// Resize-only pipeline.
    pub fn identity() -> AugmentationPlan {
        AugmentationPlan {
            scale: 1.0,
            crop: None,
            flip_h: false,
            flip_v: false,
            noise_std: 0.0,
            noise_seed: 0,
            contrast: 1.0,
            brightness: 1.0,
            sharpness: 1.0,
            morph: None,
        }
    }
}

fn scaled_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    (sh, sw)
}

/// Draws one augmentation plan. Re-samples the scale when the configured
/// crop does not fit; errors if it can never fit.
pub fn sample_plan(
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
    src_hw: (usize, usize),
) -> Result<AugmentationPlan> {
    if !cfg.enabled {
        return Ok(AugmentationPlan::identity());
    }
    let (h, w) = src_hw;
    let mut scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let crop = match cfg.crop {
        None => None,
        Some(side) => {
            let mut tries = 0;
            loop {
                let (sh, sw) = scaled_dims(h, w, scale);
                if side <= sh && side <= sw {
                    let top = rng.random_range(0..=sh - side);
                    let left = rng.random_range(0..=sw - side);
                    break Some((top, left, side));
                }
                tries += 1;
                if tries > 100 {
                    return Err(Error::dataset(format!(
                        "crop {side} cannot fit a {h}x{w} image at scales <= {}",
                        cfg.scale_max
                    )));
                }
                scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
            }
        }
    };
    let flip_h = rng.random::<f64>() < cfg.flip_prob;
    let flip_v = rng.random::<f64>() < cfg.flip_prob;
    let noise_std = rng.random_range(0.0..=cfg.noise_std_max);
    let noise_seed = rng.random::<u64>();
    let contrast = rng.random_range(cfg.contrast_min..=cfg.contrast_max);
    let brightness = rng.random_range(cfg.brightness_min..=cfg.brightness_max);
    let sharpness = rng.random_range(cfg.sharpness_min..=cfg.sharpness_max);
    let morph = if rng.random::<f64>() < cfg.morph_prob {
        let op = if rng.random::<f64>() < 0.5 { MorphOp::Dilate } else { MorphOp::Erode };
        let k = rng.random_range(cfg.morph_kernel_min..=cfg.morph_kernel_max);
        Some((op, k))
    } else {
        None
    };
    Ok(AugmentationPlan {
        scale,
        crop,
        flip_h,
        flip_v,
        noise_std,
        noise_seed,
        contrast,
        brightness,
        sharpness,
        morph,
    })
}

fn mean_blur3(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                let ii = (i as isize + di).clamp(0, h as isize - 1) as usize;
                let jj = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                acc += plane[[ii, jj]];
            }
        }
        acc / 9.0
    })
}

/// Runs the image half of a plan: geometry, then noise, contrast,
/// brightness, sharpness, then the final resize to `out_size`.
pub fn apply_plan_image(img: &Array3<f64>, plan: &AugmentationPlan, out_size: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    debug_assert_eq!(c, 3);
    let (sh, sw) = scaled_dims(h, w, plan.scale);
    let mut planes: Vec<Array2<f64>> = (0..3)
        .map(|ch| {
            let plane = img.index_axis(ndarray::Axis(0), ch).to_owned();
            if (sh, sw) == (h, w) { plane } else { resize_bilinear_plane(&plane, sh, sw) }
        })
        .collect();
    if let Some((top, left, side)) = plan.crop {
        for plane in planes.iter_mut() {
            *plane = plane.slice(s![top..top + side, left..left + side]).to_owned();
        }
    }
    for plane in planes.iter_mut() {
        if plan.flip_h {
            *plane = plane.slice(s![.., ..;-1]).to_owned();
        }
        if plan.flip_v {
            *plane = plane.slice(s![..;-1, ..]).to_owned();
        }
    }
    if plan.noise_std > 0.0 {
        let normal = Normal::new(0.0, plan.noise_std).expect("std >= 0");
        let mut noise_rng = ChaCha8Rng::seed_from_u64(plan.noise_seed);
        for plane in planes.iter_mut() {
            plane.mapv_inplace(|v| (v + normal.sample(&mut noise_rng)).clamp(0.0, 1.0));
        }
    }
    if plan.contrast != 1.0 {
        // pivot around the mean luminance so the gray level is preserved
        let n = planes[0].len() as f64;
        let gray = (0.299 * planes[0].sum() + 0.587 * planes[1].sum() + 0.114 * planes[2].sum()) / n;
        for plane in planes.iter_mut() {
            plane.mapv_inplace(|v| (gray + plan.contrast * (v - gray)).clamp(0.0, 1.0));
        }
    }
    if plan.brightness != 1.0 {
        for plane in planes.iter_mut() {
            plane.mapv_inplace(|v| (plan.brightness * v).clamp(0.0, 1.0));
        }
    }
    if plan.sharpness != 1.0 {
        for plane in planes.iter_mut() {
            let blur = mean_blur3(plane);
            *plane = Array2::from_shape_fn(plane.dim(), |(i, j)| {
                (blur[[i, j]] + plan.sharpness * (plane[[i, j]] - blur[[i, j]])).clamp(0.0, 1.0)
            });
        }
    }
    let mut out = Array3::zeros((3, out_size, out_size));
    for (ch, plane) in planes.iter().enumerate() {
        let resized = if plane.dim() == (out_size, out_size) {
            plane.clone()
        } else {
            resize_bilinear_plane(plane, out_size, out_size)
        };
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&resized);
    }
    out
}

/// Runs the mask half of a plan: the same geometry (nearest interpolation),
/// morphology jitter, final resize, and re-binarization at 0.5.
pub fn apply_plan_mask(mask: &Array2<f64>, plan: &AugmentationPlan, out_size: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let (sh, sw) = scaled_dims(h, w, plan.scale);
    let mut plane =
        if (sh, sw) == (h, w) { mask.clone() } else { resize_nearest_plane(mask, sh, sw) };
    if let Some((top, left, side)) = plan.crop {
        plane = plane.slice(s![top..top + side, left..left + side]).to_owned();
    }
    if plan.flip_h {
        plane = plane.slice(s![.., ..;-1]).to_owned();
    }
    if plan.flip_v {
        plane = plane.slice(s![..;-1, ..]).to_owned();
    }
    if let Some((op, k)) = plan.morph {
        plane = apply_morph(&plane, op, k);
    }
    if plane.dim() != (out_size, out_size) {
        plane = resize_nearest_plane(&plane, out_size, out_size);
    }
    plane.mapv_inplace(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    plane
}

/// One ready-to-batch training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Array3<f64>,
    pub mask: BinaryMask,
}

/// Loads a pair and applies either a sampled augmentation plan or the
/// resize-only identity plan.
pub fn load_example(
    pair: &ManifestPair,
    cfg: &AugmentationConfig,
    out_size: usize,
    rng: &mut ChaCha8Rng,
    augmented: bool,
) -> Result<Example> {
    let img = load_rgb_planes(&pair.image)?;
    let mask = load_mask(&pair.mask)?;
    let plan = if augmented {
        sample_plan(cfg, rng, mask.data().dim())?
    } else {
        AugmentationPlan::identity()
    };
    let image = apply_plan_image(&img, &plan, out_size);
    let mask = BinaryMask::new(apply_plan_mask(mask.data(), &plan, out_size))?;
    Ok(Example { image, mask })
}

/// Writes a small synthetic corpus of elliptical blobs under
/// `<root>/images` and `<root>/masks`. Returns the stems.
pub fn generate_blob_dataset(
    root: &Path,
    count: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let images = root.join("images");
    let masks = root.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stems = Vec::with_capacity(count);
    for idx in 0..count {
        let cx = rng.random_range(0.3..0.7) * side as f64;
        let cy = rng.random_range(0.3..0.7) * side as f64;
        let rx = rng.random_range(0.12..0.28) * side as f64;
        let ry = rng.random_range(0.12..0.28) * side as f64;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (sin_t, cos_t) = theta.sin_cos();
        let mask = Array2::from_shape_fn((side, side), |(i, j)| {
            let dy = i as f64 + 0.5 - cy;
            let dx = j as f64 + 0.5 - cx;
            let u = cos_t * dx + sin_t * dy;
            let v = -sin_t * dx + cos_t * dy;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 { 1.0 } else { 0.0 }
        });
        let tint = [
            rng.random_range(0.5..0.9),
            rng.random_range(0.2..0.5),
            rng.random_range(0.2..0.5),
        ];
        let mut img = Array3::from_shape_fn((3, side, side), |(c, i, j)| {
            let base = 0.15 + 0.1 * (i + j) as f64 / (2 * side) as f64;
            let blob = mask[[i, j]] * tint[c];
            (base + blob + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0)
        });
        // reuse the blob's own coordinates for a soft halo so edges are not
        // the only learnable cue
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
        let stem = format!("blob_{idx:03}");
        save_rgb_png(&images.join(format!("{stem}.png")), &img)?;
        save_gray_png(&masks.join(format!("{stem}.png")), &mask)?;
        stems.push(stem);
    }
    Ok(stems)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plane.png");
        let plane = Array2::from_shape_fn((5, 7), |(i, j)| ((i * 7 + j) as f64) / 34.0);
        save_gray_png(&path, &plane).unwrap();
        let back = load_gray_plane(&path).unwrap();
        assert_eq!(back.dim(), (5, 7));
        for (a, b) in plane.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn mask_threshold_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut img = image::GrayImage::new(3, 1);
        img.put_pixel(0, 0, image::Luma([127]));
        img.put_pixel(1, 0, image::Luma([128]));
        img.put_pixel(2, 0, image::Luma([255]));
        img.save(&path).unwrap();
        let mask = load_mask(&path).unwrap();
        assert_eq!(mask.data().as_slice().unwrap(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn split_count_arithmetic() {
        assert_eq!(split_counts(1450), (1160, 145, 145));
        assert_eq!(split_counts(10), (8, 1, 1));
        assert_eq!(split_counts(5), (4, 0, 1));
        for n in 1..200 {
            let (a, b, c) = split_counts(n);
            assert_eq!(a + b + c, n);
        }
    }

    #[test]
    fn manifest_builds_splits_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        generate_blob_dataset(dir.path(), 10, 16, 7).unwrap();
        let m1 = build_manifest(dir.path(), 42).unwrap();
        assert_eq!(m1.counts(), (8, 1, 1));
        assert_eq!(m1.pairs.len(), 10);
        let stems: Vec<&str> = m1.pairs.iter().map(|p| p.stem.as_str()).collect();
        let mut sorted = stems.clone();
        sorted.sort();
        assert_eq!(stems, sorted, "pairs must be stem-ordered");

        let m2 = build_manifest(dir.path(), 42).unwrap();
        assert_eq!(m1, m2, "same seed must reproduce the split");
        let m3 = build_manifest(dir.path(), 43).unwrap();
        assert_ne!(
            m1.pairs.iter().map(|p| p.split).collect::<Vec<_>>(),
            m3.pairs.iter().map(|p| p.split).collect::<Vec<_>>(),
            "different seed should move at least one pair"
        );

        let cached = load_or_build_manifest(dir.path(), 42, false).unwrap();
        assert!(DatasetManifest::cache_path(dir.path()).is_file());
        let reread = load_or_build_manifest(dir.path(), 999, false).unwrap();
        assert_eq!(cached.pairs, reread.pairs, "cache wins over a new seed");
        let rebuilt = load_or_build_manifest(dir.path(), 42, true).unwrap();
        assert_eq!(cached.pairs, rebuilt.pairs);
    }

    #[test]
    fn manifest_rejects_missing_pairs_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        assert!(build_manifest(dir.path(), 1).is_err());
        let img = Array3::zeros((3, 4, 4));
        save_rgb_png(&dir.path().join("images/a.png"), &img).unwrap();
        let err = build_manifest(dir.path(), 1).unwrap_err().to_string();
        assert!(err.contains("no mask"), "{err}");
    }

    #[test]
    fn morphology_hand_cases() {
        let mut single = Array2::zeros((5, 5));
        single[[2, 2]] = 1.0;
        let d3 = dilate(&single, 3);
        for i in 0..5 {
            for j in 0..5 {
                let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
                assert_eq!(d3[[i, j]], if inside { 1.0 } else { 0.0 });
            }
        }
        // even kernel anchors off-center: offsets are [-1, 0]
        let d2 = dilate(&single, 2);
        let mut want = Array2::zeros((5, 5));
        for i in 2..=3 {
            for j in 2..=3 {
                want[[i, j]] = 1.0;
            }
        }
        assert_eq!(d2, want);

        // erosion that would empty the mask is skipped by the jitter rule
        let eroded = erode(&single, 3);
        assert_eq!(eroded.sum(), 0.0);
        assert_eq!(apply_morph(&single, MorphOp::Erode, 3), single);
        // but a fat blob erodes normally
        let blob = Array2::from_shape_fn((7, 7), |(i, j)| {
            if (1..6).contains(&i) && (1..6).contains(&j) { 1.0 } else { 0.0 }
        });
        let er = apply_morph(&blob, MorphOp::Erode, 3);
        assert!(er.sum() > 0.0 && er.sum() < blob.sum());
    }

    #[test]
    fn disabled_config_is_resize_only() {
        let cfg = AugmentationConfig::disabled();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = sample_plan(&cfg, &mut rng, (20, 24)).unwrap();
        assert_eq!(plan, AugmentationPlan::identity());
        let img = Array3::from_shape_fn((3, 20, 24), |(c, i, j)| {
            ((c + i + j) % 5) as f64 / 5.0
        });
        let out = apply_plan_image(&img, &plan, 32);
        let want = resize_bilinear_plane(&img.index_axis(ndarray::Axis(0), 0).to_owned(), 32, 32);
        assert_eq!(out.index_axis(ndarray::Axis(0), 0).to_owned(), want);
    }

    #[test]
    fn flip_mirrors_mask_centroid() {
        let mut mask = Array2::zeros((16, 16));
        mask[[2, 3]] = 1.0;
        let plan = AugmentationPlan { flip_h: true, ..AugmentationPlan::identity() };
        let flipped = apply_plan_mask(&mask, &plan, 16);
        assert_eq!(flipped[[2, 12]], 1.0);
        assert_eq!(flipped.sum(), 1.0);
        let both = AugmentationPlan { flip_h: true, flip_v: true, ..AugmentationPlan::identity() };
        let f2 = apply_plan_mask(&mask, &both, 16);
        assert_eq!(f2[[13, 12]], 1.0);
    }

    #[test]
    fn same_plan_reapplies_identically() {
        let cfg = AugmentationConfig { crop: Some(24), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask = Array2::from_shape_fn((40, 40), |(i, j)| {
            if (i as isize - 20).pow(2) + (j as isize - 17).pow(2) <= 64 { 1.0 } else { 0.0 }
        });
        for _ in 0..10 {
            let plan = sample_plan(&cfg, &mut rng, (40, 40)).unwrap();
            let a = apply_plan_mask(&mask, &plan, 32);
            let b = apply_plan_mask(&mask, &plan, 32);
            assert_eq!(a, b);
            assert!(a.iter().all(|&v| v == 0.0 || v == 1.0), "mask must stay binary");
        }
    }

    #[test]
    fn same_seed_same_augmented_pair() {
        let cfg = AugmentationConfig::default();
        let img = Array3::from_shape_fn((3, 30, 30), |(c, i, j)| {
            (((c * 31 + i * 7 + j * 3) % 17) as f64) / 17.0
        });
        let mask = Array2::from_shape_fn((30, 30), |(i, j)| {
            if i.abs_diff(15) + j.abs_diff(15) < 8 { 1.0 } else { 0.0 }
        });
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_plan(&cfg, &mut rng, (30, 30)).unwrap();
            (apply_plan_image(&img, &plan, 32), apply_plan_mask(&mask, &plan, 32))
        };
        let (i1, m1) = run(5);
        let (i2, m2) = run(5);
        assert_eq!(i1, i2);
        assert_eq!(m1, m2);
        let (i3, _) = run(6);
        assert_ne!(i1, i3);
    }

    #[test]
    fn crop_resamples_or_errors() {
        let cfg = AugmentationConfig { crop: Some(64), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // a 64 crop cannot fit a 16x16 image at any allowed scale
        assert!(sample_plan(&cfg, &mut rng, (16, 16)).is_err());
        // but fits a 60x60 one only at upscales; plan must respect bounds
        for _ in 0..20 {
            let plan = sample_plan(&cfg, &mut rng, (60, 60)).unwrap();
            let (top, left, side) = plan.crop.unwrap();
            let (sh, sw) = scaled_dims(60, 60, plan.scale);
            assert!(top + side <= sh && left + side <= sw);
        }
    }

    #[test]
    fn blob_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let stems = generate_blob_dataset(dir.path(), 3, 32, 1).unwrap();
        assert_eq!(stems.len(), 3);
        for stem in &stems {
            let img = load_rgb_planes(&dir.path().join(format!("images/{stem}.png"))).unwrap();
            assert_eq!(img.dim(), (3, 32, 32));
            let mask = load_mask(&dir.path().join(format!("masks/{stem}.png"))).unwrap();
            assert!(mask.foreground() > 0.0, "blob masks must be nonempty");
        }
    }

    #[test]
    fn load_example_resizes_and_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        generate_blob_dataset(dir.path(), 2, 48, 2).unwrap();
        let manifest = build_manifest(dir.path(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = load_example(
            &manifest.pairs[0],
            &AugmentationConfig::default(),
            32,
            &mut rng,
            true,
        )
        .unwrap();
        assert_eq!(ex.image.dim(), (3, 32, 32));
        assert_eq!(ex.mask.data().dim(), (32, 32));
        assert!(ex.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
