//! Image- and pixel-level detection metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no positive samples")]
    NoPositives,
    #[error("no negative samples")]
    NoNegatives,
    #[error("score {0} is not a number")]
    NaN(usize),
    #[error("no anomalous pixels in any mask")]
    NoAnomalousPixels,
    #[error("no normal pixels in any mask")]
    NoNormalPixels,
    #[error("fpr limit must lie in (0, 1], got {0}")]
    BadFprLimit(f64),
    #[error("map is {0:?} but mask is {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Default upper false-positive-rate bound for PRO integration.
pub const DEFAULT_PRO_FPR: f64 = 0.3;

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricError::NaN(i));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Groups of equal score, highest first: `(positives, negatives)` per group.
fn descending_groups(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().unwrap();
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Mann–Whitney AUROC; ties count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    if neg == 0 {
        return Err(MetricError::NoNegatives);
    }
    // doubled Mann–Whitney U stays integral
    let mut twice_u: u128 = 0;
    let mut negatives_below = neg as u128;
    for (p, n) in descending_groups(scores, labels) {
        negatives_below -= n as u128;
        twice_u += 2 * p as u128 * negatives_below + (p * n) as u128;
    }
    Ok(twice_u as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Average precision with step interpolation over descending unique
/// thresholds: `Σ ΔRecall · Precision`.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    for (p, n) in descending_groups(scores, labels) {
        tp += p;
        fp += n;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Best F1 over thresholds at the unique score values (score ≥ threshold is
/// predicted anomalous).
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0f64);
    for (p, n) in descending_groups(scores, labels) {
        tp += p;
        fp += n;
        if tp > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / pos as f64;
            best = best.max(2.0 * precision * recall / (precision + recall));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub auroc: f64,
    pub aupr: f64,
    pub f1_max: f64,
}

pub fn image_metrics(scores: &[f64], labels: &[bool]) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        auroc: auroc(scores, labels)?,
        aupr: aupr(scores, labels)?,
        f1_max: f1_max(scores, labels)?,
    })
}

/// A predicted map paired with its ground-truth mask, both row-major `h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelEval {
    h: usize,
    w: usize,
    scores: Vec<f64>,
    mask: Vec<u8>,
}

impl PixelEval {
    pub fn new(h: usize, w: usize, scores: Vec<f64>, mask: Vec<u8>) -> Result<Self> {
        if scores.len() != h * w || mask.len() != h * w {
            return Err(MetricError::ShapeMismatch(
                (h, w),
                (scores.len(), mask.len()),
            ));
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(MetricError::NaN(i));
        }
        Ok(Self { h, w, scores, mask })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }
}

/// 8-connected components of the nonzero mask cells. Returns per-pixel
/// component ids (`None` for background) and component sizes.
pub fn connected_components(h: usize, w: usize, mask: &[u8]) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut labels = vec![None; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] == 0 || labels[start].is_some() {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        labels[start] = Some(id);
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (i, j) = ((p / w) as isize, (p % w) as isize);
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (ni, nj) = (i + di, j + dj);
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let q = ni as usize * w + nj as usize;
                    if mask[q] != 0 && labels[q].is_none() {
                        labels[q] = Some(id);
                        stack.push(q);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Trapezoidal area under a polyline with non-decreasing x, truncated at
/// `limit` (linear interpolation at the cut).
pub fn truncated_trapezoid(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area
}

/// The (FPR, mean per-region overlap) curve over a descending sweep of every
/// unique predicted value, starting at (0, 0).
pub fn pro_curve(evals: &[PixelEval]) -> Result<Vec<(f64, f64)>> {
    #[derive(Clone, Copy)]
    enum Pixel {
        Normal,
        Region(usize),
    }
    let mut sizes: Vec<usize> = Vec::new();
    let mut pixels: Vec<(f64, Pixel)> = Vec::new();
    for e in evals {
        let (labels, comp_sizes) = connected_components(e.h, e.w, &e.mask);
        let base = sizes.len();
        sizes.extend(comp_sizes);
        pixels.extend(
            e.scores
                .iter()
                .zip(labels)
                .map(|(&s, l)| (s, l.map_or(Pixel::Normal, |c| Pixel::Region(base + c)))),
        );
    }
    if sizes.is_empty() {
        return Err(MetricError::NoAnomalousPixels);
    }
    let normals = pixels
        .iter()
        .filter(|(_, p)| matches!(p, Pixel::Normal))
        .count();
    if normals == 0 {
        return Err(MetricError::NoNormalPixels);
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut overlap_sum) = (0usize, 0.0f64);
    let mut idx = 0;
    while idx < pixels.len() {
        let threshold = pixels[idx].0;
        while idx < pixels.len() && pixels[idx].0.total_cmp(&threshold) == Ordering::Equal {
            match pixels[idx].1 {
                Pixel::Normal => fp += 1,
                Pixel::Region(c) => overlap_sum += 1.0 / sizes[c] as f64,
            }
            idx += 1;
        }
        curve.push((fp as f64 / normals as f64, overlap_sum / sizes.len() as f64));
    }
    Ok(curve)
}

/// Per-region overlap integrated over FPR ∈ [0, fpr_limit], divided by the
/// limit.
pub fn pro(evals: &[PixelEval], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(MetricError::BadFprLimit(fpr_limit));
    }
    let curve = pro_curve(evals)?;
    Ok(truncated_trapezoid(&curve, fpr_limit) / fpr_limit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub pauroc: f64,
    pub pro: f64,
    pub pf1_max: f64,
}

/// Pixel AUROC and F1-max over all pixels of all images, plus PRO.
pub fn pixel_metrics(evals: &[PixelEval], fpr_limit: f64) -> Result<PixelMetrics> {
    let scores: Vec<f64> = evals
        .iter()
        .flat_map(|e| e.scores.iter().copied())
        .collect();
    let labels: Vec<bool> = evals
        .iter()
        .flat_map(|e| e.mask.iter().map(|&m| m != 0))
        .collect();
    Ok(PixelMetrics {
        pauroc: auroc(&scores, &labels)?,
        pro: pro(evals, fpr_limit)?,
        pf1_max: f1_max(&scores, &labels)?,
    })
}
