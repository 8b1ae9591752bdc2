//! Evaluation suite: PR curves, mean F-measure with the adaptive threshold,
//! MAE, S-measure, and tolerance-matched ODS/OIS edge F-measures.
//!
//! Edge matching here uses dilation-by-tolerance intersection instead of the
//! BSDS bipartite correspondence solver, and ODS aggregates the per-image
//! F-measures (macro average), so the per-image optimum always dominates the
//! shared one. Both are deliberate simplifications of the official benchmark.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default number of binarization thresholds (saliency-benchmark convention).
pub const DEFAULT_THRESHOLDS: usize = 255;

/// Default matching tolerance in pixels for edge evaluation at desk scale.
pub const DEFAULT_EDGE_TOLERANCE: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Uniform threshold grid strictly inside (0, 1): `(j + 1) / (n + 1)`.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    (0..n).map(|j| (j + 1) as f64 / (n + 1) as f64).collect()
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn check_aligned(preds: &[Tensor], gts: &[Tensor]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        check_pair(p, g)?;
    }
    Ok(())
}

/// Dataset PR curve: pixels are binarized at each grid threshold
/// (`pred >= t`), true/false positives and false negatives aggregate over the
/// whole dataset. Precision is 1 when nothing is predicted.
pub fn pr_curve(preds: &[Tensor], gts: &[Tensor], n_thresholds: usize) -> Result<PrCurve> {
    if n_thresholds < 2 {
        return Err(Error::Config("need at least 2 thresholds".into()));
    }
    check_aligned(preds, gts)?;
    let thresholds = threshold_grid(n_thresholds);
    let mut tp = vec![0u64; n_thresholds];
    let mut pred_pos = vec![0u64; n_thresholds];
    let mut gt_pos = 0u64;
    for (pred, gt) in preds.iter().zip(gts) {
        // sort pixel values once; each threshold is then a partition point
        let mut pairs: Vec<(f64, bool)> = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&p, &g)| (p, g >= 0.5))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite predictions"));
        gt_pos += pairs.iter().filter(|(_, g)| *g).count() as u64;
        // suffix counts of ground-truth positives
        let mut gt_suffix = vec![0u64; pairs.len() + 1];
        for i in (0..pairs.len()).rev() {
            gt_suffix[i] = gt_suffix[i + 1] + pairs[i].1 as u64;
        }
        for (ti, &t) in thresholds.iter().enumerate() {
            let idx = pairs.partition_point(|&(p, _)| p < t);
            pred_pos[ti] += (pairs.len() - idx) as u64;
            tp[ti] += gt_suffix[idx];
        }
    }
    let precision = (0..n_thresholds)
        .map(|i| {
            if pred_pos[i] == 0 {
                1.0
            } else {
                tp[i] as f64 / pred_pos[i] as f64
            }
        })
        .collect();
    let recall = (0..n_thresholds)
        .map(|i| {
            if gt_pos == 0 {
                1.0
            } else {
                tp[i] as f64 / gt_pos as f64
            }
        })
        .collect();
    Ok(PrCurve {
        thresholds,
        precision,
        recall,
    })
}

/// `(1 + b2) * p * r / (b2 * p + r)`, zero when the denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

/// The conventional precision-emphasizing exponent for saliency F-measure.
pub const F_BETA_SQ: f64 = 0.3;

fn binary_counts(pred_bin: impl Iterator<Item = bool>, gt: &[f64]) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fpn) = (0u64, 0u64, 0u64);
    for (p, &g) in pred_bin.zip(gt) {
        let g = g >= 0.5;
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fpn += 1,
            _ => {}
        }
    }
    (tp, fp, fpn)
}

fn precision_recall(tp: u64, fp: u64, fn_: u64) -> (f64, f64) {
    let p = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    (p, r)
}

/// Mean F-measure with the adaptive threshold: each map is binarized at
/// `min(1, 2 * mean)` (strictly greater than), scored with beta^2 = 0.3, and
/// the per-image scores are averaged.
pub fn mean_f_measure(preds: &[Tensor], gts: &[Tensor]) -> Result<f64> {
    check_aligned(preds, gts)?;
    if preds.is_empty() {
        return Err(Error::Arity("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for (pred, gt) in preds.iter().zip(gts) {
        let t = (2.0 * pred.mean()).min(1.0);
        let (tp, fp, fn_) = binary_counts(pred.data().iter().map(|&p| p > t), gt.data());
        let (p, r) = precision_recall(tp, fp, fn_);
        total += f_beta(p, r, F_BETA_SQ);
    }
    Ok(total / preds.len() as f64)
}

/// Mean absolute per-pixel difference.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / pred.numel() as f64)
}

pub fn mean_mae(preds: &[Tensor], gts: &[Tensor]) -> Result<f64> {
    check_aligned(preds, gts)?;
    if preds.is_empty() {
        return Err(Error::Arity("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += mae(p, g)?;
    }
    Ok(total / preds.len() as f64)
}

// ---------------------------------------------------------------------------
// S-measure
// ---------------------------------------------------------------------------

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 0.0, 0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt(), v.len())
}

/// Object-aware component: foreground similarity on `pred`, background
/// similarity on `1 - pred`, mixed by the foreground fraction.
fn object_score(pred: &Tensor, gt: &Tensor) -> f64 {
    let mu = gt.mean();
    let score = |values: Vec<f64>| -> f64 {
        let (m, sd, n) = mean_std(values.into_iter());
        if n == 0 {
            0.0
        } else {
            2.0 * m / (m * m + 1.0 + sd + f64::EPSILON)
        }
    };
    let fg: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, &g)| g >= 0.5)
        .map(|(&p, _)| p)
        .collect();
    let bg: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, &g)| g < 0.5)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    mu * score(fg) + (1.0 - mu) * score(bg)
}

fn region_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n == 0 {
        return 1.0;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let sx = x.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / denom;
    let sy = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / denom;
    let sxy = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / denom;
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Region-aware component: SSIM-style similarity over the four quadrants
/// around the ground-truth centroid, weighted by quadrant area.
fn region_score(pred: &Tensor, gt: &Tensor) -> f64 {
    let (h, w) = (gt.h(), gt.w());
    let gd = gt.data();
    let total: f64 = gd.iter().filter(|&&g| g >= 0.5).count() as f64;
    let (mut cy, mut cx) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gd[y * w + x] >= 0.5 {
                cy += y as f64;
                cx += x as f64;
            }
        }
    }
    let cy = ((cy / total).round() as usize).min(h - 1);
    let cx = ((cx / total).round() as usize).min(w - 1);

    let mut score = 0.0;
    for (y0, y1, x0, x1) in [
        (0, cy + 1, 0, cx + 1),
        (0, cy + 1, cx + 1, w),
        (cy + 1, h, 0, cx + 1),
        (cy + 1, h, cx + 1, w),
    ] {
        let mut xs = Vec::with_capacity((y1 - y0) * x1.saturating_sub(x0));
        let mut ys = Vec::with_capacity(xs.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                xs.push(pred.data()[y * w + x]);
                ys.push(gd[y * w + x]);
            }
        }
        let weight = xs.len() as f64 / (h * w) as f64;
        if !xs.is_empty() {
            score += weight * region_ssim(&xs, &ys);
        }
    }
    score
}

/// Structural similarity `alpha * S_object + (1 - alpha) * S_region`, with the
/// usual degenerate conventions for empty and full ground truths.
pub fn s_measure(pred: &Tensor, gt: &Tensor, alpha: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let mu = gt.data().iter().filter(|&&g| g >= 0.5).count() as f64 / gt.numel() as f64;
    let s = if mu == 0.0 {
        1.0 - pred.mean()
    } else if mu == 1.0 {
        pred.mean()
    } else {
        alpha * object_score(pred, gt) + (1.0 - alpha) * region_score(pred, gt)
    };
    Ok(s.clamp(0.0, 1.0))
}

/// Components `(S_object, S_region)` for a non-degenerate ground truth.
pub fn s_measure_components(pred: &Tensor, gt: &Tensor) -> Result<(f64, f64)> {
    check_pair(pred, gt)?;
    Ok((object_score(pred, gt), region_score(pred, gt)))
}

pub const S_MEASURE_ALPHA: f64 = 0.5;

pub fn mean_s_measure(preds: &[Tensor], gts: &[Tensor]) -> Result<f64> {
    check_aligned(preds, gts)?;
    if preds.is_empty() {
        return Err(Error::Arity("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += s_measure(p, g, S_MEASURE_ALPHA)?;
    }
    Ok(total / preds.len() as f64)
}

// ---------------------------------------------------------------------------
// Edge evaluation: thinning, tolerance matching, ODS / OIS
// ---------------------------------------------------------------------------

/// Zhang-Suen thinning of a binary map down to one-pixel skeletons.
pub fn skeletonize(map: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut img: Vec<bool> = map.to_vec();
    let idx = |y: usize, x: usize| y * w + x;
    loop {
        let mut changed = false;
        for phase in 0..2 {
            let mut kill = Vec::new();
            for y in 1..h.saturating_sub(1) {
                for x in 1..w.saturating_sub(1) {
                    if !img[idx(y, x)] {
                        continue;
                    }
                    let p = [
                        img[idx(y - 1, x)],
                        img[idx(y - 1, x + 1)],
                        img[idx(y, x + 1)],
                        img[idx(y + 1, x + 1)],
                        img[idx(y + 1, x)],
                        img[idx(y + 1, x - 1)],
                        img[idx(y, x - 1)],
                        img[idx(y - 1, x - 1)],
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let transitions = (0..8)
                        .filter(|&i| !p[i] && p[(i + 1) % 8])
                        .count();
                    if transitions != 1 {
                        continue;
                    }
                    // p[0] = north, p[2] = east, p[4] = south, p[6] = west
                    let ok = if phase == 0 {
                        (!p[0] || !p[2] || !p[4]) && (!p[2] || !p[4] || !p[6])
                    } else {
                        (!p[0] || !p[2] || !p[6]) && (!p[0] || !p[4] || !p[6])
                    };
                    if ok {
                        kill.push(idx(y, x));
                    }
                }
            }
            if !kill.is_empty() {
                changed = true;
                for i in kill {
                    img[i] = false;
                }
            }
        }
        if !changed {
            return img;
        }
    }
}

/// Chebyshev dilation by `radius` pixels.
fn dilate(map: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return map.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !map[y as usize * w + x as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                        out[ny as usize * w + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Per-image, per-threshold edge F1: predictions are binarized, thinned, and
/// matched against ground-truth edge pixels within `tolerance_px` (dilation
/// intersection, both directions).
fn edge_f_matrix(
    preds: &[Tensor],
    gts: &[Tensor],
    tolerance_px: usize,
    thresholds: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_aligned(preds, gts)?;
    let mut rows = Vec::with_capacity(preds.len());
    for (pred, gt) in preds.iter().zip(gts) {
        if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("edge ground truth is not binary".into()));
        }
        let (h, w) = (pred.h(), pred.w());
        let gt_bin: Vec<bool> = gt.data().iter().map(|&v| v == 1.0).collect();
        let gt_count = gt_bin.iter().filter(|&&v| v).count() as f64;
        let gt_dilated = dilate(&gt_bin, h, w, tolerance_px);
        let mut row = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let bin: Vec<bool> = pred.data().iter().map(|&p| p >= t).collect();
            let thin = skeletonize(&bin, h, w);
            let pred_count = thin.iter().filter(|&&v| v).count() as f64;
            let matched_pred = thin
                .iter()
                .zip(&gt_dilated)
                .filter(|(&p, &g)| p && g)
                .count() as f64;
            let pred_dilated = dilate(&thin, h, w, tolerance_px);
            let matched_gt = gt_bin
                .iter()
                .zip(&pred_dilated)
                .filter(|(&g, &p)| g && p)
                .count() as f64;
            let precision = if pred_count == 0.0 {
                1.0
            } else {
                matched_pred / pred_count
            };
            let recall = if gt_count == 0.0 {
                1.0
            } else {
                matched_gt / gt_count
            };
            row.push(f_beta(precision, recall, 1.0));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Optimal-dataset-scale and optimal-image-scale edge F-measures over a shared
/// threshold grid. ODS maximizes the dataset-mean F over one shared threshold;
/// OIS averages each image's own best F, so `OIS >= ODS` always holds.
pub fn edge_ods_ois(
    preds: &[Tensor],
    gts: &[Tensor],
    tolerance_px: usize,
    n_thresholds: usize,
) -> Result<(f64, f64)> {
    if n_thresholds < 2 {
        return Err(Error::Config("need at least 2 thresholds".into()));
    }
    if preds.is_empty() {
        return Err(Error::Arity("empty evaluation set".into()));
    }
    let thresholds = threshold_grid(n_thresholds);
    let f = edge_f_matrix(preds, gts, tolerance_px, &thresholds)?;
    let n_img = f.len() as f64;
    let ods = (0..n_thresholds)
        .map(|t| f.iter().map(|row| row[t]).sum::<f64>() / n_img)
        .fold(0.0_f64, f64::max);
    let ois = f
        .iter()
        .map(|row| row.iter().cloned().fold(0.0_f64, f64::max))
        .sum::<f64>()
        / n_img;
    Ok((ods, ois))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SaliencyReport {
    pub f_beta: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub pr: PrCurve,
}

#[derive(Debug, Clone)]
pub struct EdgeReport {
    pub ods: f64,
    pub ois: f64,
}

#[derive(Debug, Clone)]
pub enum MetricReport {
    Saliency(SaliencyReport),
    Edge(EdgeReport),
}

impl MetricReport {
    /// The report's key-value pairs, exactly `{f_beta, mae, s_measure}` or
    /// `{ods, ois}`.
    pub fn key_values(&self) -> Vec<(&'static str, f64)> {
        match self {
            MetricReport::Saliency(r) => vec![
                ("f_beta", r.f_beta),
                ("mae", r.mae),
                ("s_measure", r.s_measure),
            ],
            MetricReport::Edge(r) => vec![("ods", r.ods), ("ois", r.ois)],
        }
    }
}

pub fn evaluate_saliency(
    preds: &[Tensor],
    gts: &[Tensor],
    n_thresholds: usize,
) -> Result<SaliencyReport> {
    Ok(SaliencyReport {
        f_beta: mean_f_measure(preds, gts)?,
        mae: mean_mae(preds, gts)?,
        s_measure: mean_s_measure(preds, gts)?,
        pr: pr_curve(preds, gts, n_thresholds)?,
    })
}

pub fn evaluate_edges(
    preds: &[Tensor],
    gts: &[Tensor],
    tolerance_px: usize,
    n_thresholds: usize,
) -> Result<EdgeReport> {
    let (ods, ois) = edge_ods_ois(preds, gts, tolerance_px, n_thresholds)?;
    Ok(EdgeReport { ods, ois })
}
