use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::registry::ModalityRegistry;
use super::{EvalError, Result};

/// Scale of a score list; all values handed to one aggregate share a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Fraction,
    Percent,
}

impl Unit {
    fn upper(self) -> f64 {
        match self {
            Unit::Fraction => 1.0,
            Unit::Percent => 100.0,
        }
    }

    fn check(self, v: f64) -> Result<()> {
        if v.is_finite() && (0.0..=self.upper()).contains(&v) {
            Ok(())
        } else {
            Err(EvalError::OutOfRange {
                value: v,
                unit: self,
            })
        }
    }
}

/// Mean AP within each modality's category set.
pub fn modality_map(
    per_category: &BTreeMap<String, f64>,
    registry: &ModalityRegistry,
) -> Result<BTreeMap<String, f64>> {
    if let Some(c) = per_category
        .keys()
        .find(|c| registry.modality_of(c).is_none())
    {
        return Err(EvalError::UnregisteredCategory(c.clone()));
    }
    let mut out = BTreeMap::new();
    for (m, cats) in registry.modalities() {
        let mut total = 0.0;
        for c in cats {
            total += per_category
                .get(c)
                .ok_or_else(|| EvalError::MissingCategory(c.clone()))?;
        }
        out.insert(m.to_string(), total / cats.len() as f64);
    }
    Ok(out)
}

/// `|M| / sum(1 / mAP_m)`, defined as 0 when any modality scores 0.
pub fn harmonic_modality_map(maps: &[f64], unit: Unit) -> Result<f64> {
    if maps.is_empty() {
        return Err(EvalError::Empty);
    }
    for &v in maps {
        unit.check(v)?;
    }
    if maps.contains(&0.0) {
        return Ok(0.0);
    }
    let inv: f64 = maps.iter().map(|v| 1.0 / v).sum();
    Ok(maps.len() as f64 / inv)
}

/// Unweighted mean over the union of all categories.
pub fn global_union_map(per_category: &BTreeMap<String, f64>) -> Result<f64> {
    if per_category.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(per_category.values().sum::<f64>() / per_category.len() as f64)
}

/// Union mean recovered from per-modality means: `sum |C_m| mAP_m / sum |C_m|`.
pub fn weighted_union_map(groups: &[(usize, f64)]) -> Result<f64> {
    let total: usize = groups.iter().map(|(n, _)| n).sum();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    Ok(groups.iter().map(|&(n, m)| n as f64 * m).sum::<f64>() / total as f64)
}
