//! Overlap and boundary metrics for binary segmentations, and the soft Dice
//! loss used for training.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{LabelError, Segment, SegmentMaskSet};
use crate::volume::{neumaier_sum, Grid, Mask, Shape3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("Hausdorff distance is undefined for an empty mask")]
    EmptyMask,
    #[error("percentile must be in (0, 100], got {0}")]
    BadPercentile(f64),
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("segment {0} missing from one of the mask sets")]
    MissingSegment(Segment),
    #[error(transparent)]
    Label(#[from] LabelError),
}

fn check_shapes(a: &Mask, b: &Mask) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

fn overlap_counts(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    (inter, na, nb)
}

/// Dice–Sørensen coefficient `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let (inter, na, nb) = overlap_counts(a, b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let (inter, na, nb) = overlap_counts(a, b);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Exact squared Euclidean distance from every voxel to the nearest set voxel
/// of `mask`, with anisotropic spacing. Unreachable voxels (empty mask) stay
/// at infinity.
pub fn squared_distance_transform(mask: &Mask, spacing: [f64; 3]) -> Grid<f64> {
    let shape = mask.shape();
    let mut dist = mask.map(|b| if b { 0.0 } else { f64::INFINITY });
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in (0..3).rev() {
        let n = shape[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for u in 0..shape[others[0]] {
            for v in 0..shape[others[1]] {
                let base = u * strides[others[0]] + v * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|i| dist.data()[base + i * strides[axis]]));
                transform_line(&line, spacing[axis], &mut out);
                for (i, &d) in out.iter().enumerate() {
                    dist.data_mut()[base + i * strides[axis]] = d;
                }
            }
        }
    }
    dist
}

/// 1D lower envelope of parabolas (Felzenszwalb–Huttenlocher).
fn transform_line(f: &[f64], step: f64, out: &mut Vec<f64>) {
    out.clear();
    let sites: Vec<usize> = (0..f.len()).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        out.extend(std::iter::repeat_n(f64::INFINITY, f.len()));
        return;
    }
    let pos = |i: usize| i as f64 * step;
    let meet = |q: usize, p: usize| ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        let mut s = f64::NEG_INFINITY;
        while let Some(&top) = hull.last() {
            s = meet(q, top);
            if s <= bounds[hull.len() - 1] {
                hull.pop();
                bounds.pop();
            } else {
                break;
            }
        }
        if hull.is_empty() {
            s = f64::NEG_INFINITY;
        }
        hull.push(q);
        bounds.push(s);
    }
    let mut k = 0;
    for i in 0..f.len() {
        let x = pos(i);
        while k + 1 < hull.len() && bounds[k + 1] < x {
            k += 1;
        }
        let p = hull[k];
        let dx = x - pos(p);
        out.push(dx * dx + f[p]);
    }
}

/// Distances from each set voxel of `from` to the nearest set voxel of `to`.
pub fn directed_distances(from: &Mask, to: &Mask, spacing: [f64; 3]) -> Result<Vec<f64>, MetricError> {
    check_shapes(from, to)?;
    if !from.any() || !to.any() {
        return Err(MetricError::EmptyMask);
    }
    let dt = squared_distance_transform(to, spacing);
    Ok(from.set_indices().map(|i| dt.data()[i].sqrt()).collect())
}

/// Linear-interpolated percentile of unsorted values.
pub fn percentile(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Symmetric Hausdorff distance in millimetres. With `percentile < 100` the
/// percentile of each directed distance set is taken before the maximum.
pub fn hausdorff(a: &Mask, b: &Mask, spacing: [f64; 3], pct: f64) -> Result<f64, MetricError> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(MetricError::BadPercentile(pct));
    }
    let mut ab = directed_distances(a, b, spacing)?;
    let mut ba = directed_distances(b, a, spacing)?;
    if pct == 100.0 {
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        return Ok(max(&ab).max(max(&ba)));
    }
    Ok(percentile(&mut ab, pct).max(percentile(&mut ba, pct)))
}

/// Per-class soft Dice losses averaged over classes:
/// `1 − (2Σpg + s) / (Σp² + Σg² + s)`.
pub fn soft_dice_loss(pred: &[&[f64]], gt: &[&[f64]], smooth: f64) -> Result<f64, MetricError> {
    Ok(soft_dice_terms(pred, gt, smooth)?.0)
}

/// Loss and its gradient with respect to every prediction value.
pub fn soft_dice_loss_with_grad(
    pred: &[&[f64]],
    gt: &[&[f64]],
    smooth: f64,
) -> Result<(f64, Vec<Vec<f64>>), MetricError> {
    let (loss, sums) = soft_dice_terms(pred, gt, smooth)?;
    let classes = pred.len() as f64;
    let grads = pred
        .iter()
        .zip(gt)
        .zip(sums)
        .map(|((p, g), (inter, denom))| {
            let num = 2.0 * inter + smooth;
            let d2 = denom * denom;
            p.iter().zip(g.iter()).map(|(&pi, &gi)| -(2.0 * gi * denom - num * 2.0 * pi) / (d2 * classes)).collect()
        })
        .collect();
    Ok((loss, grads))
}

fn soft_dice_terms(pred: &[&[f64]], gt: &[&[f64]], smooth: f64) -> Result<(f64, Vec<(f64, f64)>), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gt.len()));
    }
    let mut sums = Vec::with_capacity(pred.len());
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(MetricError::LengthMismatch(p.len(), g.len()));
        }
        let inter = neumaier_sum(p.iter().zip(g.iter()).map(|(a, b)| a * b));
        let pp = neumaier_sum(p.iter().map(|a| a * a));
        let gg = neumaier_sum(g.iter().map(|b| b * b));
        let denom = pp + gg + smooth;
        total += 1.0 - (2.0 * inter + smooth) / denom;
        sums.push((inter, denom));
    }
    let n = pred.len().max(1) as f64;
    Ok((total / n, sums))
}

/// Per-segment probability fields, possibly at an upscaled resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaps {
    pub maps: BTreeMap<Segment, Grid<f64>>,
    pub resolution_factor: usize,
}

impl ProbabilityMaps {
    pub fn get(&self, segment: Segment) -> Option<&Grid<f64>> {
        self.maps.get(&segment)
    }

    /// Averages each `factor³` block, bringing upscaled outputs back to the
    /// source grid.
    pub fn downsample_mean(&self, factor: usize) -> ProbabilityMaps {
        if factor <= 1 {
            return self.clone();
        }
        let maps = self.maps.iter().map(|(s, g)| (*s, block_mean(g, factor))).collect();
        ProbabilityMaps { maps, resolution_factor: (self.resolution_factor / factor).max(1) }
    }
}

fn block_mean(g: &Grid<f64>, factor: usize) -> Grid<f64> {
    let src = g.shape();
    let shape = src.map(|d| d / factor);
    let mut out = Grid::filled(shape, 0.0);
    let norm = (factor * factor * factor) as f64;
    for idx in 0..g.len() {
        let [i, j, k] = g.coords(idx);
        let (i, j, k) = (i / factor, j / factor, k / factor);
        if i < shape[0] && j < shape[1] && k < shape[2] {
            let o = out.index([i, j, k]);
            out.data_mut()[o] += g.data()[idx] / norm;
        }
    }
    out
}

/// Voxelwise `prob ≥ tau` per segment.
pub fn threshold_predictions(probs: &ProbabilityMaps, tau: f64) -> Result<SegmentMaskSet, MetricError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(MetricError::BadThreshold(tau));
    }
    let masks = probs.maps.iter().map(|(s, g)| (*s, g.map(|p| p >= tau))).collect();
    Ok(SegmentMaskSet::new(masks, probs.resolution_factor)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentScores {
    pub dice: f64,
    pub iou: f64,
    /// Undefined (None) when either mask is empty.
    pub hausdorff_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub record_id: String,
    pub per_segment: BTreeMap<Segment, SegmentScores>,
    pub mean_dice_over: Vec<Segment>,
}

impl MetricReport {
    /// Mean Dice over `mean_dice_over` (segments absent from the report are skipped).
    pub fn mean_dice(&self) -> f64 {
        let vals: Vec<f64> =
            self.mean_dice_over.iter().filter_map(|s| self.per_segment.get(s).map(|m| m.dice)).collect();
        if vals.is_empty() {
            return f64::NAN;
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn csv_header() -> &'static str {
        "record_id,segment,dice,iou,hd"
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (seg, s) in &self.per_segment {
            let hd = s.hausdorff_mm.map(|h| format!("{h:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{:.6},{:.6},{}", self.record_id, seg, s.dice, s.iou, hd);
        }
        out
    }
}

/// Scores every segment present in both sets. Spacing applies to the
/// predicted grid (already divided by the resolution factor if upscaled).
pub fn evaluate(
    record_id: &str,
    pred: &SegmentMaskSet,
    gt: &SegmentMaskSet,
    spacing: [f64; 3],
    hd_percentile: f64,
) -> Result<MetricReport, MetricError> {
    let mut per_segment = BTreeMap::new();
    for (seg, g) in gt.iter() {
        let p = pred.get(seg).ok_or(MetricError::MissingSegment(seg))?;
        let hd = match hausdorff(p, g, spacing, hd_percentile) {
            Ok(h) => Some(h),
            Err(MetricError::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        per_segment.insert(seg, SegmentScores { dice: dice(p, g)?, iou: iou(p, g)?, hausdorff_mm: hd });
    }
    let mean_dice_over = [Segment::Et, Segment::At, Segment::Tc, Segment::Wt]
        .into_iter()
        .filter(|s| per_segment.contains_key(s))
        .collect();
    Ok(MetricReport { record_id: record_id.to_string(), per_segment, mean_dice_over })
}
