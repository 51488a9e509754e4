use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox, Detection, GroundTruthEntry};
use super::{EvalError, Result};

/// 0.50, 0.55, ..., 0.95.
pub const DEFAULT_IOU_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Precision-recall integration rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoints,
    /// Mean interpolated precision at recall 0, 0.01, ..., 1.
    #[serde(rename = "101pt")]
    Point101,
}

impl std::str::FromStr for ApMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all-points" => Ok(Self::AllPoints),
            "101pt" => Ok(Self::Point101),
            other => Err(format!(
                "unknown AP mode `{other}` (expected all-points or 101pt)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAps {
    pub thresholds: Vec<f64>,
    pub aps: Vec<f64>,
    pub mean: f64,
}

fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| cmp_box(&a.bbox, &b.bbox))
}

fn cmp_box(a: &BBox, b: &BBox) -> Ordering {
    a.key()
        .iter()
        .zip(b.key().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Detections in evaluation order: score descending, then image id, then
/// box coordinates. Only exact duplicates keep their input order.
pub(crate) fn ranked(dets: &[Detection]) -> Vec<&Detection> {
    let mut v: Vec<&Detection> = dets.iter().collect();
    v.sort_by(|a, b| score_order(a, b));
    v
}

/// Greedy matching of ranked detections; `true` marks a true positive.
pub(crate) fn match_ranked(
    ranked: &[&Detection],
    gts: &[GroundTruthEntry],
    threshold: f64,
) -> Vec<bool> {
    let mut by_image: BTreeMap<&str, Vec<(BBox, bool)>> = BTreeMap::new();
    for g in gts {
        by_image
            .entry(g.image_id.as_str())
            .or_default()
            .push((g.bbox, false));
    }
    for boxes in by_image.values_mut() {
        boxes.sort_by(|a, b| cmp_box(&a.0, &b.0));
    }
    ranked
        .iter()
        .map(|d| {
            let Some(cands) = by_image.get_mut(d.image_id.as_str()) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (i, (gb, taken)) in cands.iter().enumerate() {
                if *taken {
                    continue;
                }
                let o = iou(&d.bbox, gb);
                if o >= threshold && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((i, o));
                }
            }
            match best {
                Some((i, _)) => {
                    cands[i].1 = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn check_single_category(dets: &[Detection], gts: &[GroundTruthEntry]) -> Result<()> {
    let mut cats = dets
        .iter()
        .map(|d| &d.category)
        .chain(gts.iter().map(|g| &g.category));
    if let Some(first) = cats.next() {
        if let Some(other) = cats.find(|c| *c != first) {
            return Err(EvalError::MixedCategories(first.clone(), other.clone()));
        }
    }
    Ok(())
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(EvalError::Threshold(t))
    }
}

/// Integrate a precision-recall sequence given per-rank true-positive flags.
pub(crate) fn integrate(tp: &[bool], npos: usize, mode: ApMode) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / npos as f64);
    }
    match mode {
        ApMode::AllPoints => {
            let mut envelope = precision.clone();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        ApMode::Point101 => {
            let mut total = 0.0;
            for step in 0..=100 {
                let level = step as f64 / 100.0;
                let best = recall
                    .iter()
                    .zip(&precision)
                    .filter(|(r, _)| **r >= level)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                total += best;
            }
            total / 101.0
        }
    }
}

/// Average precision for one category at one IoU threshold.
///
/// With no ground truth the AP is 1.0 when there are also no detections and
/// 0.0 otherwise.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruthEntry],
    iou_threshold: f64,
    mode: ApMode,
) -> Result<f64> {
    check_threshold(iou_threshold)?;
    check_single_category(dets, gts)?;
    Ok(ap_unchecked(dets, gts, iou_threshold, mode))
}

fn ap_unchecked(dets: &[Detection], gts: &[GroundTruthEntry], threshold: f64, mode: ApMode) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    if dets.is_empty() {
        return 0.0;
    }
    let order = ranked(dets);
    let tp = match_ranked(&order, gts, threshold);
    integrate(&tp, gts.len(), mode)
}

/// AP at each threshold and their mean.
pub fn map_over_thresholds(
    dets: &[Detection],
    gts: &[GroundTruthEntry],
    thresholds: &[f64],
    mode: ApMode,
) -> Result<ThresholdAps> {
    if thresholds.is_empty() {
        return Err(EvalError::EmptyThresholds);
    }
    for &t in thresholds {
        check_threshold(t)?;
    }
    check_single_category(dets, gts)?;
    let aps: Vec<f64> = thresholds
        .iter()
        .map(|&t| ap_unchecked(dets, gts, t, mode))
        .collect();
    let mean = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok(ThresholdAps {
        thresholds: thresholds.to_vec(),
        aps,
        mean,
    })
}
