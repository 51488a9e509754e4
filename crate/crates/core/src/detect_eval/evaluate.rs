use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::{average_precision, map_over_thresholds, ApMode, DEFAULT_IOU_THRESHOLDS};
use super::boxes::{Detection, GroundTruthEntry};
use super::metrics::{global_union_map, harmonic_modality_map, modality_map, Unit};
use super::registry::ModalityRegistry;
use super::{EvalError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub ap_mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            ap_mode: ApMode::AllPoints,
        }
    }
}

/// A score at IoU 0.5 and averaged over the threshold grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ap50: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub modality: String,
    pub num_gt: usize,
    pub num_det: usize,
    /// AP at each configured threshold.
    pub aps: Vec<f64>,
    pub ap50: f64,
    /// Mean of `aps`.
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub ap_mode: ApMode,
    /// Registry order: modalities by name, categories as listed.
    pub per_category: Vec<CategoryReport>,
    pub per_modality_map: BTreeMap<String, Scores>,
    pub global_map: Scores,
    pub hmap: Scores,
}

impl EvalReport {
    /// One-line percent summary, e.g. `mAP=51.57 H-mAP=53.02`.
    pub fn summary(&self) -> String {
        format!(
            "mAP={:.2} H-mAP={:.2}",
            100.0 * self.global_map.ap,
            100.0 * self.hmap.ap
        )
    }
}

fn check_record(registry: &ModalityRegistry, category: &str, modality: &str) -> Result<()> {
    let expected = registry
        .modality_of(category)
        .ok_or_else(|| EvalError::UnregisteredCategory(category.to_string()))?;
    if expected != modality {
        return Err(EvalError::ModalityMismatch {
            category: category.to_string(),
            expected: expected.to_string(),
            found: modality.to_string(),
        });
    }
    Ok(())
}

/// Evaluate every registered category and aggregate per modality, over the
/// union of categories, and harmonically across modalities.
///
/// Categories run in parallel; the result is identical to a sequential run.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruthEntry],
    registry: &ModalityRegistry,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let mut det_by_cat: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    let mut gt_by_cat: BTreeMap<&str, Vec<GroundTruthEntry>> = BTreeMap::new();
    for d in dets {
        check_record(registry, &d.category, &d.modality)?;
        det_by_cat.entry(&d.category).or_default().push(d.clone());
    }
    for g in gts {
        check_record(registry, &g.category, &g.modality)?;
        gt_by_cat.entry(&g.category).or_default().push(g.clone());
    }
    let jobs: Vec<(&str, &str)> = registry
        .modalities()
        .flat_map(|(m, cats)| cats.iter().map(move |c| (m, c.as_str())))
        .collect();
    let empty_d = Vec::new();
    let empty_g = Vec::new();
    let per_category = jobs
        .par_iter()
        .map(|&(modality, category)| {
            let d = det_by_cat.get(category).unwrap_or(&empty_d);
            let g = gt_by_cat.get(category).unwrap_or(&empty_g);
            let grid = map_over_thresholds(d, g, &config.iou_thresholds, config.ap_mode)?;
            let ap50 = average_precision(d, g, 0.5, config.ap_mode)?;
            Ok(CategoryReport {
                category: category.to_string(),
                modality: modality.to_string(),
                num_gt: g.len(),
                num_det: d.len(),
                aps: grid.aps,
                ap50,
                ap: grid.mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let ap_map: BTreeMap<String, f64> = per_category
        .iter()
        .map(|c| (c.category.clone(), c.ap))
        .collect();
    let ap50_map: BTreeMap<String, f64> = per_category
        .iter()
        .map(|c| (c.category.clone(), c.ap50))
        .collect();
    let m_ap = modality_map(&ap_map, registry)?;
    let m_ap50 = modality_map(&ap50_map, registry)?;
    let per_modality_map = m_ap
        .iter()
        .map(|(m, &ap)| {
            (
                m.clone(),
                Scores {
                    ap50: m_ap50[m],
                    ap,
                },
            )
        })
        .collect();
    let global_map = Scores {
        ap50: global_union_map(&ap50_map)?,
        ap: global_union_map(&ap_map)?,
    };
    let hmap = Scores {
        ap50: harmonic_modality_map(
            &m_ap50.values().copied().collect::<Vec<_>>(),
            Unit::Fraction,
        )?,
        ap: harmonic_modality_map(&m_ap.values().copied().collect::<Vec<_>>(), Unit::Fraction)?,
    };
    Ok(EvalReport {
        iou_thresholds: config.iou_thresholds.clone(),
        ap_mode: config.ap_mode,
        per_category,
        per_modality_map,
        global_map,
        hmap,
    })
}
