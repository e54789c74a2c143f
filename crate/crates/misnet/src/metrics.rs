//! Segmentation quality metrics: overlap scores, weighted F-measure,
//! structure measure, enhanced-alignment measure, and mean absolute error,
//! with dataset-level aggregation. `oracle` holds per-pixel reference
//! implementations used to verify the production code.

use crate::error::{Error, Result};
use crate::types::{BinaryMask, ProbMap};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::path::Path;

const EPS: f64 = f64::EPSILON;

/// How a probability map is turned into a binary prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    Fixed(f64),
    /// 2x the map mean, capped at 1.
    Adaptive,
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Fixed(0.5)
    }
}

/// Threshold handling for the enhanced-alignment measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlignmentMode {
    /// Binarize at 0.5 once.
    FixedHalf,
    /// Max over the 8-bit threshold grid (plus 0.5).
    Max,
}

fn mean2(a: &Array2<f64>) -> f64 {
    a.sum() / a.len() as f64
}

fn resolve_threshold(s: &Array2<f64>, mode: ThresholdMode) -> f64 {
    match mode {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::Adaptive => (2.0 * mean2(s)).min(1.0),
    }
}

/// Binarizes a probability map: pixels >= threshold become foreground.
pub fn binarize(s: &ProbMap, mode: ThresholdMode) -> Array2<f64> {
    let t = resolve_threshold(s.data(), mode);
    s.data().mapv(|v| if v >= t { 1.0 } else { 0.0 })
}

/// Dice and IoU of the binarized prediction against the mask. Both are 1
/// when prediction and mask are both empty.
pub fn mdice_miou(s: &ProbMap, g: &BinaryMask, mode: ThresholdMode) -> (f64, f64) {
    let sb = binarize(s, mode);
    let gp = g.data();
    assert_eq!(sb.dim(), gp.dim(), "metric inputs must share dims");
    let inter: f64 = sb.iter().zip(gp.iter()).map(|(a, b)| a * b).sum();
    let s_sum = sb.sum();
    let g_sum = gp.sum();
    if s_sum == 0.0 && g_sum == 0.0 {
        return (1.0, 1.0);
    }
    let dice = 2.0 * inter / (s_sum + g_sum);
    let union = s_sum + g_sum - inter;
    let iou = inter / union;
    (dice, iou)
}

/// Mean absolute error between map and mask.
pub fn mae(s: &ProbMap, g: &BinaryMask) -> f64 {
    let sp = s.data();
    let gp = g.data();
    assert_eq!(sp.dim(), gp.dim(), "metric inputs must share dims");
    sp.iter().zip(gp.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / sp.len() as f64
}

/// Squared distance to the nearest foreground pixel plus that pixel's
/// coordinates, for every pixel. Ties resolve to the lexicographically
/// smallest (distance^2, row, col). None when the mask has no foreground.
fn nearest_foreground(g: &Array2<f64>) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let (h, w) = g.dim();
    if g.sum() == 0.0 {
        return None;
    }
    // nearest foreground column within each row (ties pick the left one)
    let mut row_near: Vec<Option<usize>> = vec![None; h * w];
    for r in 0..h {
        let mut last: Option<usize> = None;
        for c in 0..w {
            if g[[r, c]] > 0.5 {
                last = Some(c);
            }
            row_near[r * w + c] = last;
        }
        let mut next: Option<usize> = None;
        for c in (0..w).rev() {
            if g[[r, c]] > 0.5 {
                next = Some(c);
            }
            if let Some(nc) = next {
                row_near[r * w + c] = match row_near[r * w + c] {
                    Some(lc) if c - lc <= nc - c => Some(lc),
                    _ => Some(nc),
                };
            }
        }
    }
    let mut d2 = vec![0usize; h * w];
    let mut near = vec![(0usize, 0usize); h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best = usize::MAX;
            let mut best_rc = (0usize, 0usize);
            for rp in 0..h {
                if best != usize::MAX && rp > r {
                    let dr = rp - r;
                    if dr * dr >= best {
                        break;
                    }
                }
                if let Some(cp) = row_near[rp * w + c] {
                    let dr = r.abs_diff(rp);
                    let dc = c.abs_diff(cp);
                    let cand = dr * dr + dc * dc;
                    if cand < best {
                        best = cand;
                        best_rc = (rp, cp);
                    }
                }
            }
            d2[r * w + c] = best;
            near[r * w + c] = best_rc;
        }
    }
    Some((d2, near))
}

fn gaussian_kernel(n: usize, sigma: f64) -> Array2<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut k = Array2::from_shape_fn((n, n), |(i, j)| {
        let dy = i as f64 - c;
        let dx = j as f64 - c;
        (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
    });
    let s = k.sum();
    k.mapv_inplace(|v| v / s);
    k
}

fn correlate_same(x: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (kh, kw) = k.dim();
    let (rh, rw) = (kh / 2, kw / 2);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for ki in 0..kh {
            for kj in 0..kw {
                let ii = i as isize + ki as isize - rh as isize;
                let jj = j as isize + kj as isize - rw as isize;
                if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                    acc += k[[ki, kj]] * x[[ii as usize, jj as usize]];
                }
            }
        }
        acc
    })
}

/// Boundary-aware F-measure: errors near the mask are discounted through a
/// Gaussian dependency window over the foreground and background errors
/// decay with distance from the mask. Returns the score and an
/// undefined-recall flag which is set (with score 0) on an empty mask.
pub fn weighted_fmeasure(s: &ProbMap, g: &BinaryMask) -> (f64, bool) {
    let sp = s.data();
    let gp = g.data();
    assert_eq!(sp.dim(), gp.dim(), "metric inputs must share dims");
    let Some((d2, near)) = nearest_foreground(gp) else {
        return (0.0, true);
    };
    let (h, w) = gp.dim();
    let e = Array2::from_shape_fn((h, w), |(i, j)| (sp[[i, j]] - gp[[i, j]]).abs());
    // background pixels inherit the error of their nearest foreground pixel
    let et = Array2::from_shape_fn((h, w), |(i, j)| {
        if gp[[i, j]] > 0.5 {
            e[[i, j]]
        } else {
            let (ri, ci) = near[i * w + j];
            e[[ri, ci]]
        }
    });
    let ea = correlate_same(&et, &gaussian_kernel(7, 5.0));
    let decay = 0.5f64.ln() / 5.0;
    let mut fg_err_sum = 0.0;
    let mut fg_count = 0.0;
    let mut bg_err_sum = 0.0;
    for i in 0..h {
        for j in 0..w {
            if gp[[i, j]] > 0.5 {
                let ew = e[[i, j]].min(ea[[i, j]]);
                fg_err_sum += ew;
                fg_count += 1.0;
            } else {
                let dist = (d2[i * w + j] as f64).sqrt();
                let b = 2.0 - (decay * dist).exp();
                bg_err_sum += e[[i, j]] * b;
            }
        }
    }
    let tpw = fg_count - fg_err_sum;
    let fpw = bg_err_sum;
    let recall = 1.0 - fg_err_sum / fg_count;
    let precision = tpw / (EPS + tpw + fpw);
    (2.0 * recall * precision / (EPS + recall + precision), false)
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let sigma = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(sp: &Array2<f64>, gp: &Array2<f64>) -> f64 {
    let fg: Vec<f64> = sp
        .iter()
        .zip(gp.iter())
        .filter(|(_, g)| **g > 0.5)
        .map(|(s, _)| *s)
        .collect();
    let bg: Vec<f64> = sp
        .iter()
        .zip(gp.iter())
        .filter(|(_, g)| **g <= 0.5)
        .map(|(s, _)| 1.0 - *s)
        .collect();
    let u = mean2(gp);
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// 1-based centroid (col, row) of the mask, rounded half away from zero.
fn centroid_1based(gp: &Array2<f64>) -> (usize, usize) {
    let (h, w) = gp.dim();
    let total = gp.sum();
    if total == 0.0 {
        return (((w as f64) / 2.0).round() as usize, ((h as f64) / 2.0).round() as usize);
    }
    let mut col_acc = 0.0;
    let mut row_acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            if gp[[r, c]] > 0.5 {
                col_acc += (c + 1) as f64;
                row_acc += (r + 1) as f64;
            }
        }
    }
    ((col_acc / total).round() as usize, (row_acc / total).round() as usize)
}

fn region_ssim(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let n = p.len() as f64;
    let x = mean2(p);
    let y = mean2(q);
    let sx2 = p.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0 + EPS);
    let sy2 = q.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / (n - 1.0 + EPS);
    let sxy = p
        .iter()
        .zip(q.iter())
        .map(|(a, b)| (a - x) * (b - y))
        .sum::<f64>()
        / (n - 1.0 + EPS);
    let alignment = 4.0 * x * y * sxy;
    let baseline = (x * x + y * y) * (sx2 + sy2);
    if alignment != 0.0 {
        alignment / (baseline + EPS)
    } else if baseline == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(sp: &Array2<f64>, gp: &Array2<f64>) -> f64 {
    let (h, w) = gp.dim();
    let (cx, cy) = centroid_1based(gp);
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quad = |r0: usize, r1: usize, c0: usize, c1: usize| -> f64 {
        if r0 == r1 || c0 == c1 {
            // empty block always carries zero weight
            return 0.0;
        }
        let ps = sp.slice(ndarray::s![r0..r1, c0..c1]).to_owned();
        let gs = gp.slice(ndarray::s![r0..r1, c0..c1]).to_owned();
        region_ssim(&ps, &gs)
    };
    w1 * quad(0, cy, 0, cx)
        + w2 * quad(0, cy, cx, w)
        + w3 * quad(cy, h, 0, cx)
        + w4 * quad(cy, h, cx, w)
}

/// Structural similarity between map and mask: a blend of object-level
/// foreground/background statistics and a four-block region comparison
/// split at the mask centroid, weighted by `alpha`. Degenerate masks fall
/// back to mean-based scores; the result is clamped to [0, 1].
pub fn s_measure(s: &ProbMap, g: &BinaryMask, alpha: f64) -> f64 {
    let sp = s.data();
    let gp = g.data();
    assert_eq!(sp.dim(), gp.dim(), "metric inputs must share dims");
    let y = mean2(gp);
    if y == 0.0 {
        1.0 - mean2(sp)
    } else if y == 1.0 {
        mean2(sp)
    } else {
        let q = alpha * s_object(sp, gp) + (1.0 - alpha) * s_region(sp, gp);
        q.clamp(0.0, 1.0)
    }
}

fn alignment_score(sb: &Array2<f64>, gp: &Array2<f64>) -> f64 {
    let fg = gp.sum();
    let total = gp.len() as f64;
    let enhanced: Array2<f64> = if fg == 0.0 {
        sb.mapv(|v| 1.0 - v)
    } else if fg == total {
        sb.clone()
    } else {
        let mu_s = mean2(sb);
        let mu_g = mean2(gp);
        Array2::from_shape_fn(gp.dim(), |(i, j)| {
            let a_s = sb[[i, j]] - mu_s;
            let a_g = gp[[i, j]] - mu_g;
            let align = 2.0 * a_g * a_s / (a_g * a_g + a_s * a_s + EPS);
            (align + 1.0) * (align + 1.0) / 4.0
        })
    };
    enhanced.sum() / total
}

/// Enhanced-alignment measure: agreement of bias-centered prediction and
/// mask, averaged over pixels. `Max` sweeps the 8-bit threshold grid and
/// returns the best score.
pub fn e_measure(s: &ProbMap, g: &BinaryMask, mode: AlignmentMode) -> f64 {
    let sp = s.data();
    let gp = g.data();
    assert_eq!(sp.dim(), gp.dim(), "metric inputs must share dims");
    let binary_at = |t: f64| sp.mapv(|v| if v >= t { 1.0 } else { 0.0 });
    match mode {
        AlignmentMode::FixedHalf => alignment_score(&binary_at(0.5), gp),
        AlignmentMode::Max => {
            let mut best = f64::NEG_INFINITY;
            for k in 0..=255usize {
                best = best.max(alignment_score(&binary_at(k as f64 / 255.0), gp));
            }
            best.max(alignment_score(&binary_at(0.5), gp))
        }
    }
}

/// Per-image metric row. `flags` records degenerate conventions that fired
/// (for example an empty mask making recall undefined).
#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub id: String,
    pub mdice: f64,
    pub miou: f64,
    pub wfm: f64,
    pub sm: f64,
    pub em: f64,
    pub mae: f64,
    pub flags: Vec<String>,
}

/// Dataset-level report: per-image rows plus arithmetic means.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub dataset_id: String,
    pub per_image: Vec<ImageMetrics>,
    /// Order: mdice, miou, wfm, sm, em, mae.
    pub means: [f64; 6],
}

impl MetricReport {
    /// CSV with one row per image and a closing MEAN row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,mDice,mIoU,wFm,Sm,Em,MAE,flags\n");
        for row in &self.per_image {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                row.id, row.mdice, row.miou, row.wfm, row.sm, row.em, row.mae,
                row.flags.join(";")
            ));
        }
        let m = &self.means;
        out.push_str(&format!(
            "MEAN,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},\n",
            m[0], m[1], m[2], m[3], m[4], m[5]
        ));
        out
    }
}

/// Scores a list of (id, prediction, mask) pairs and aggregates the means.
pub fn evaluate_pairs(
    dataset_id: &str,
    items: &[(String, ProbMap, BinaryMask)],
    mode: ThresholdMode,
) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::metric("no image pairs to evaluate".to_string()));
    }
    let mut per_image = Vec::with_capacity(items.len());
    let mut sums = [0.0f64; 6];
    for (id, s, g) in items {
        if s.data().dim() != g.data().dim() {
            return Err(Error::metric(format!(
                "{id}: prediction dims {:?} differ from mask dims {:?}",
                s.data().dim(),
                g.data().dim()
            )));
        }
        let (mdice, miou) = mdice_miou(s, g, mode);
        let (wfm, wfm_undefined) = weighted_fmeasure(s, g);
        let sm = s_measure(s, g, 0.5);
        let em = e_measure(s, g, AlignmentMode::Max);
        let mae_v = mae(s, g);
        let mut flags = Vec::new();
        if wfm_undefined {
            flags.push("wfm_undefined_empty_mask".to_string());
        }
        let row = ImageMetrics { id: id.clone(), mdice, miou, wfm, sm, em, mae: mae_v, flags };
        for (acc, v) in sums.iter_mut().zip([mdice, miou, wfm, sm, em, mae_v]) {
            *acc += v;
        }
        per_image.push(row);
    }
    let n = per_image.len() as f64;
    let means = sums.map(|v| v / n);
    Ok(MetricReport { dataset_id: dataset_id.to_string(), per_image, means })
}

fn stem_map(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
        if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::dataset(format!("unreadable file name: {}", path.display())))?
            .to_string();
        if out.insert(stem.clone(), path.clone()).is_some() {
            return Err(Error::dataset(format!("duplicate image stem {stem} in {}", dir.display())));
        }
    }
    Ok(out)
}

/// Evaluates a directory of predictions against a directory of masks with
/// matching file stems. Predictions are resized to mask resolution; rows
/// are ordered by stem.
pub fn evaluate_dataset(
    pred_dir: &Path,
    gt_dir: &Path,
    dataset_id: &str,
    mode: ThresholdMode,
) -> Result<MetricReport> {
    let preds = stem_map(pred_dir)?;
    let gts = stem_map(gt_dir)?;
    if gts.is_empty() || preds.is_empty() {
        return Err(Error::dataset(format!(
            "no images found under {} / {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    for stem in preds.keys() {
        if !gts.contains_key(stem) {
            return Err(Error::dataset(format!("prediction {stem} has no mask")));
        }
    }
    for stem in gts.keys() {
        if !preds.contains_key(stem) {
            return Err(Error::dataset(format!("mask {stem} has no prediction")));
        }
    }
    let mut items = Vec::with_capacity(gts.len());
    for (stem, gt_path) in &gts {
        let mask = crate::datapipe::load_mask(gt_path)?;
        let mut plane = crate::datapipe::load_gray_plane(&preds[stem])?;
        let (gh, gw) = mask.data().dim();
        if plane.dim() != (gh, gw) {
            plane = crate::tensor::resize_bilinear_plane(&plane, gh, gw);
            plane.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
        items.push((stem.clone(), ProbMap::new(plane)?, mask));
    }
    evaluate_pairs(dataset_id, &items, mode)
}

/// Per-pixel reference implementations. Every function here recomputes its
/// metric with plain loops and no shared helpers, so the production code
/// above can be diffed against an independent transcription.
pub mod oracle {
    use ndarray::Array2;

    const EPS: f64 = f64::EPSILON;

    pub fn mae(s: &Array2<f64>, g: &Array2<f64>) -> f64 {
        let (h, w) = s.dim();
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                acc += (s[[i, j]] - g[[i, j]]).abs();
            }
        }
        acc / (h * w) as f64
    }

    pub fn dice_iou(s: &Array2<f64>, g: &Array2<f64>, threshold: f64) -> (f64, f64) {
        let (h, w) = s.dim();
        let (mut inter, mut s_sum, mut g_sum) = (0.0, 0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let sb = if s[[i, j]] >= threshold { 1.0 } else { 0.0 };
                inter += sb * g[[i, j]];
                s_sum += sb;
                g_sum += g[[i, j]];
            }
        }
        if s_sum == 0.0 && g_sum == 0.0 {
            return (1.0, 1.0);
        }
        (2.0 * inter / (s_sum + g_sum), inter / (s_sum + g_sum - inter))
    }

    /// Brute-force nearest foreground pixel per pixel, scanning the whole
    /// mask row-major with strict improvement, i.e. the lexicographic
    /// minimum of (distance^2, row, col).
    pub fn nearest_foreground(g: &Array2<f64>) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
        let (h, w) = g.dim();
        let fg: Vec<(usize, usize)> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&(r, c)| g[[r, c]] > 0.5)
            .collect();
        if fg.is_empty() {
            return None;
        }
        let mut d2 = vec![0usize; h * w];
        let mut near = vec![(0usize, 0usize); h * w];
        for r in 0..h {
            for c in 0..w {
                let mut best = usize::MAX;
                let mut best_rc = (0, 0);
                for &(fr, fc) in &fg {
                    let dr = r.abs_diff(fr);
                    let dc = c.abs_diff(fc);
                    let cand = dr * dr + dc * dc;
                    if cand < best {
                        best = cand;
                        best_rc = (fr, fc);
                    }
                }
                d2[r * w + c] = best;
                near[r * w + c] = best_rc;
            }
        }
        Some((d2, near))
    }

    pub fn weighted_fmeasure(s: &Array2<f64>, g: &Array2<f64>) -> (f64, bool) {
        let (h, w) = s.dim();
        let Some((d2, near)) = nearest_foreground(g) else {
            return (0.0, true);
        };
        let mut kernel = [[0.0f64; 7]; 7];
        let mut ksum = 0.0;
        for (i, row) in kernel.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let dy = i as f64 - 3.0;
                let dx = j as f64 - 3.0;
                *cell = (-(dy * dy + dx * dx) / 50.0).exp();
                ksum += *cell;
            }
        }
        for row in kernel.iter_mut() {
            for cell in row.iter_mut() {
                *cell /= ksum;
            }
        }
        let mut fg_err = 0.0;
        let mut fg_n = 0.0;
        let mut bg_err = 0.0;
        for i in 0..h {
            for j in 0..w {
                let e_here = (s[[i, j]] - g[[i, j]]).abs();
                if g[[i, j]] > 0.5 {
                    // dependency-smoothed error at this pixel
                    let mut ea = 0.0;
                    for (ki, krow) in kernel.iter().enumerate() {
                        for (kj, kv) in krow.iter().enumerate() {
                            let ii = i as isize + ki as isize - 3;
                            let jj = j as isize + kj as isize - 3;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            let (ii, jj) = (ii as usize, jj as usize);
                            let et = if g[[ii, jj]] > 0.5 {
                                (s[[ii, jj]] - g[[ii, jj]]).abs()
                            } else {
                                let (nr, nc) = near[ii * w + jj];
                                (s[[nr, nc]] - g[[nr, nc]]).abs()
                            };
                            ea += kv * et;
                        }
                    }
                    fg_err += e_here.min(ea);
                    fg_n += 1.0;
                } else {
                    let dist = (d2[i * w + j] as f64).sqrt();
                    bg_err += e_here * (2.0 - (0.5f64.ln() / 5.0 * dist).exp());
                }
            }
        }
        let tpw = fg_n - fg_err;
        let r = 1.0 - fg_err / fg_n;
        let p = tpw / (EPS + tpw + bg_err);
        (2.0 * r * p / (EPS + r + p), false)
    }

    pub fn s_measure(s: &Array2<f64>, g: &Array2<f64>, alpha: f64) -> f64 {
        let (h, w) = s.dim();
        let n = (h * w) as f64;
        let mut gsum = 0.0;
        let mut ssum = 0.0;
        for i in 0..h {
            for j in 0..w {
                gsum += g[[i, j]];
                ssum += s[[i, j]];
            }
        }
        let y = gsum / n;
        if y == 0.0 {
            return 1.0 - ssum / n;
        }
        if y == 1.0 {
            return ssum / n;
        }

        let score_side = |fg_side: bool| -> f64 {
            let mut vals = Vec::new();
            for i in 0..h {
                for j in 0..w {
                    let on = g[[i, j]] > 0.5;
                    if on == fg_side {
                        vals.push(if fg_side { s[[i, j]] } else { 1.0 - s[[i, j]] });
                    }
                }
            }
            if vals.is_empty() {
                return 0.0;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = if vals.len() < 2 {
                0.0
            } else {
                (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() as f64 - 1.0))
                    .sqrt()
            };
            2.0 * m / (m * m + 1.0 + sd + EPS)
        };
        let object = y * score_side(true) + (1.0 - y) * score_side(false);

        let mut col_acc = 0.0;
        let mut row_acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                if g[[i, j]] > 0.5 {
                    col_acc += (j + 1) as f64;
                    row_acc += (i + 1) as f64;
                }
            }
        }
        let cx = (col_acc / gsum).round() as usize;
        let cy = (row_acc / gsum).round() as usize;
        let block = |r0: usize, r1: usize, c0: usize, c1: usize| -> f64 {
            if r0 == r1 || c0 == c1 {
                return 0.0;
            }
            let bn = ((r1 - r0) * (c1 - c0)) as f64;
            let mut mx = 0.0;
            let mut my = 0.0;
            for i in r0..r1 {
                for j in c0..c1 {
                    mx += s[[i, j]];
                    my += g[[i, j]];
                }
            }
            mx /= bn;
            my /= bn;
            let (mut vx, mut vy, mut vxy) = (0.0, 0.0, 0.0);
            for i in r0..r1 {
                for j in c0..c1 {
                    vx += (s[[i, j]] - mx) * (s[[i, j]] - mx);
                    vy += (g[[i, j]] - my) * (g[[i, j]] - my);
                    vxy += (s[[i, j]] - mx) * (g[[i, j]] - my);
                }
            }
            vx /= bn - 1.0 + EPS;
            vy /= bn - 1.0 + EPS;
            vxy /= bn - 1.0 + EPS;
            let a = 4.0 * mx * my * vxy;
            let b = (mx * mx + my * my) * (vx + vy);
            if a != 0.0 {
                a / (b + EPS)
            } else if b == 0.0 {
                1.0
            } else {
                0.0
            }
        };
        let area = n;
        let w1 = (cx * cy) as f64 / area;
        let w2 = ((w - cx) * cy) as f64 / area;
        let w3 = (cx * (h - cy)) as f64 / area;
        let w4 = 1.0 - w1 - w2 - w3;
        let region = w1 * block(0, cy, 0, cx)
            + w2 * block(0, cy, cx, w)
            + w3 * block(cy, h, 0, cx)
            + w4 * block(cy, h, cx, w);
        (alpha * object + (1.0 - alpha) * region).clamp(0.0, 1.0)
    }

    pub fn e_measure_at(s: &Array2<f64>, g: &Array2<f64>, threshold: f64) -> f64 {
        let (h, w) = s.dim();
        let n = (h * w) as f64;
        let mut gsum = 0.0;
        let mut bsum = 0.0;
        for i in 0..h {
            for j in 0..w {
                gsum += g[[i, j]];
                bsum += if s[[i, j]] >= threshold { 1.0 } else { 0.0 };
            }
        }
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                let sb = if s[[i, j]] >= threshold { 1.0 } else { 0.0 };
                let enhanced = if gsum == 0.0 {
                    1.0 - sb
                } else if gsum == n {
                    sb
                } else {
                    let a_s = sb - bsum / n;
                    let a_g = g[[i, j]] - gsum / n;
                    let align = 2.0 * a_g * a_s / (a_g * a_g + a_s * a_s + EPS);
                    (align + 1.0) * (align + 1.0) / 4.0
                };
                acc += enhanced;
            }
        }
        acc / n
    }

    pub fn e_measure_max(s: &Array2<f64>, g: &Array2<f64>) -> f64 {
        let mut best = e_measure_at(s, g, 0.5);
        for k in 0..=255usize {
            best = best.max(e_measure_at(s, g, k as f64 / 255.0));
        }
        best
    }
}
